"""Vision encoder: patch embedding, patch merging, stage forward, fusion."""

import dataclasses

import numpy as np
import pytest

from refseg.autodiff import Tensor
from refseg.config import ModelConfig
from refseg.errors import ShapeError, UsageError
from refseg.params import init_params
from refseg.vision import (patch_embed, patch_merge, vision_stage_forward)

from conftest import check_grads, micro_config, sample_paths


def test_patch_embed_zero_image_returns_positional_embedding(default_cfg):
    p = init_params(default_cfg, 0)
    out = patch_embed(default_cfg, p, np.zeros((3, 64, 64)))
    np.testing.assert_array_equal(out.data, p["patch_embed.pos"].data)


def test_patch_grid_position_count():
    # an 8px image cut into 4px patches yields a 2x2 grid of 4 positions
    from refseg.vision import _patch_indices
    idx = _patch_indices(8, 4)
    assert idx.shape == (4, 3 * 16)
    assert len(np.unique(idx)) == 3 * 64  # every pixel appears exactly once


def test_patch_embed_wrong_size_raises(default_cfg):
    p = init_params(default_cfg, 0)
    with pytest.raises(ShapeError):
        patch_embed(default_cfg, p, np.zeros((3, 32, 32)))


def test_patch_swap_locality():
    cfg = micro_config(image_size=32, patch_size=4)
    p = init_params(cfg, 1)
    rng = np.random.default_rng(3)
    image = rng.uniform(0, 1, (3, 32, 32))
    swapped = image.copy()
    # swap patch (0,0) with patch (1,1); their rows are 0 and grid+1
    swapped[:, 0:4, 0:4], swapped[:, 4:8, 4:8] = (image[:, 4:8, 4:8].copy(),
                                                  image[:, 0:4, 0:4].copy())
    pos = p["patch_embed.pos"].data
    base = patch_embed(cfg, p, image).data - pos
    moved = patch_embed(cfg, p, swapped).data - pos
    grid = 32 // 4
    np.testing.assert_allclose(moved[0], base[grid + 1], atol=1e-12)
    np.testing.assert_allclose(moved[grid + 1], base[0], atol=1e-12)
    untouched = [r for r in range(grid * grid) if r not in (0, grid + 1)]
    np.testing.assert_allclose(moved[untouched], base[untouched], atol=1e-12)


def merge_params(c_in: int, c_out: int, weight: np.ndarray) -> "Params":
    from refseg.params import ManifestEntry, Params
    tensors = {"down.weight": Tensor(weight, requires_grad=True),
               "down.bias": Tensor(np.zeros(c_out), requires_grad=True)}
    manifest = [ManifestEntry("down.weight", weight.shape, "weight"),
                ManifestEntry("down.bias", (c_out,), "bias")]
    return Params(tensors, manifest)


def test_patch_merge_hand_summed_example():
    # 2x2 single-channel map [[1,2],[3,4]] with a summing affine -> 10
    p = merge_params(1, 1, np.ones((4, 1)))
    x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    out = patch_merge(p, "down", x, 2, 2)
    assert out.shape == (1, 1)
    assert out.data[0, 0] == 10.0


def test_patch_merge_neighbor_order_is_tl_tr_bl_br():
    # weight selecting the k-th concatenated block reveals the gather order
    x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))  # row-major 2x2
    for k, expected in enumerate([1.0, 2.0, 3.0, 4.0]):
        w = np.zeros((4, 1))
        w[k, 0] = 1.0
        out = patch_merge(merge_params(1, 1, w), "down", x, 2, 2)
        assert out.data[0, 0] == expected


def test_patch_merge_odd_map_raises():
    p = merge_params(1, 1, np.ones((4, 1)))
    with pytest.raises(ShapeError):
        patch_merge(p, "down", Tensor(np.ones((9, 1))), 3, 3)


def test_stage_shapes_default_config(default_cfg):
    p = init_params(default_cfg, 0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(0, 1, (256, 32)))
    lang = Tensor(rng.normal(0, 1, (12, 64)))
    padding = np.zeros(12, dtype=bool)
    out = vision_stage_forward(default_cfg, p, 1, x, lang, padding)
    assert out.v.shape == (256, 32)
    assert out.m_hat.shape == (256, 32)
    assert out.f_v.shape == (64, 64)
    assert (out.h, out.w) == (16, 16)


def test_last_stage_has_no_downsampled_output(default_cfg):
    p = init_params(default_cfg, 0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(0, 1, (4, 256)))
    lang = Tensor(rng.normal(0, 1, (12, 64)))
    out = vision_stage_forward(default_cfg, p, 4, x, lang, np.zeros(12, bool))
    assert out.f_v is None
    assert out.m.shape == (4, 256)


def zero_fusion_sublayers(p, stage: int) -> None:
    for name in (f"vision.stage{stage}.fusion.attn1.out_proj",
                 f"vision.stage{stage}.fusion.attn2.out_proj"):
        if f"{name}.weight" in p:
            p[f"{name}.weight"].data[:] = 0.0
            p[f"{name}.bias"].data[:] = 0.0
    for name in (f"vision.stage{stage}.fusion.ffn1.fc2",
                 f"vision.stage{stage}.fusion.ffn2.fc2"):
        if f"{name}.weight" in p:
            p[f"{name}.weight"].data[:] = 0.0
            p[f"{name}.bias"].data[:] = 0.0


def test_residual_literalness_bitwise(default_cfg):
    """With fusion sublayer outputs zeroed the fusion equations collapse to
    exact identities on the stage features."""
    p = init_params(default_cfg, 0)
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(0, 1, (256, 32)))
    lang = Tensor(rng.normal(0, 1, (12, 64)))
    padding = np.zeros(12, dtype=bool)
    zero_fusion_sublayers(p, 1)
    out = vision_stage_forward(default_cfg, p, 1, x, lang, padding)
    assert (out.m_hat.data == out.v.data).all()
    assert (out.m.data == out.v.data).all()
    # downsampled path reduces to the bare downsampler applied to V
    bare = patch_merge(p, "vision.stage1.down", out.v, 16, 16)
    assert (out.f_v.data == bare.data).all()


def test_fusion_disabled_is_language_independent():
    cfg = dataclasses.replace(ModelConfig(), fusion_stages=(2, 3, 4))
    p = init_params(cfg, 0)
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(0, 1, (256, 32)))
    padding = np.zeros(12, dtype=bool)
    lang_a = Tensor(rng.normal(0, 1, (12, 64)))
    lang_b = Tensor(rng.normal(0, 1, (12, 64)))
    out_a = vision_stage_forward(cfg, p, 1, x, lang_a, padding)
    out_b = vision_stage_forward(cfg, p, 1, x, lang_b, padding)
    np.testing.assert_array_equal(out_a.m.data, out_b.m.data)
    np.testing.assert_array_equal(out_a.f_v.data, out_b.f_v.data)
    assert (out_a.m_hat.data == out_a.v.data).all()


def test_fusion_enabled_without_language_raises(default_cfg):
    p = init_params(default_cfg, 0)
    with pytest.raises(UsageError):
        vision_stage_forward(default_cfg, p, 1,
                             Tensor(np.zeros((256, 32))), None, None)


def test_stage_input_shape_checked(default_cfg):
    p = init_params(default_cfg, 0)
    with pytest.raises(ShapeError):
        vision_stage_forward(default_cfg, p, 1, Tensor(np.zeros((100, 32))),
                             Tensor(np.zeros((12, 64))), np.zeros(12, bool))


def test_spatial_chain_across_stages(default_cfg):
    assert [default_cfg.stage_resolution(i) for i in default_cfg.stages] == \
        [16, 8, 4, 2]


def test_full_stage_gradients_micro():
    cfg = micro_config()
    p = init_params(cfg, 0)
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(0, 1, (64, 4)))
    lang = Tensor(rng.normal(0, 1, (4, 8)))
    padding = np.array([False, False, False, True])
    weights = rng.normal(0, 1, (16, 6))

    def make_loss():
        out = vision_stage_forward(cfg, p, 1, x, lang, padding)
        return (out.f_v * weights).sum()

    paths = [q for q in p.paths() if q.startswith("vision.stage1")]
    assert check_grads(make_loss, p, paths, rng, coords_per_param=2,
                       tol=1e-5) <= 1e-5
