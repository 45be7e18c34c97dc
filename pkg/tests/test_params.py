"""Manifest structure and deterministic initialization."""

import csv
import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest

from refseg.config import ModelConfig
from refseg.errors import ConfigError
from refseg.params import build_manifest, init_params

from conftest import micro_config


def test_init_is_deterministic_bitwise():
    cfg = ModelConfig()
    a = init_params(cfg, seed=0)
    b = init_params(cfg, seed=0)
    assert a.paths() == b.paths()
    for path in a.paths():
        np.testing.assert_array_equal(a[path].data, b[path].data)


def test_different_seeds_differ():
    cfg = micro_config()
    a = init_params(cfg, seed=0)
    b = init_params(cfg, seed=1)
    assert any(not np.array_equal(a[p].data, b[p].data) for p in a.paths())


def test_manifest_has_one_log_tau_per_stage():
    params = init_params(ModelConfig(), seed=0)
    taus = [e for e in params.manifest if e.kind == "log_tau"]
    assert len(taus) == 4
    assert {e.path for e in taus} == {f"align.stage{i}.log_tau" for i in range(1, 5)}
    for e in taus:
        assert params[e.path].data == pytest.approx(math.log(0.07))


def test_alignment_projection_shapes():
    params = init_params(ModelConfig(), seed=0)
    assert params["align.stage1.v_proj.weight"].shape == (32, 32)
    assert params["align.stage4.v_proj.weight"].shape == (256, 32)
    assert params["align.stage2.l_proj.weight"].shape == (64, 32)


def test_all_values_finite_and_weights_truncated():
    params = init_params(ModelConfig(), seed=3)
    for entry in params.manifest:
        data = params[entry.path].data
        assert np.isfinite(data).all(), entry.path
        if entry.kind == "weight":
            assert np.abs(data).max() <= 2.0 * 0.02 + 1e-12, entry.path


def test_biases_zero_gains_one():
    params = init_params(micro_config(), seed=0)
    for entry in params.manifest:
        if entry.kind == "bias":
            assert not params[entry.path].data.any(), entry.path
        if entry.kind == "gain":
            assert (params[entry.path].data == 1.0).all(), entry.path


def test_manifest_tracks_fusion_and_align_switches():
    full = {e.path for e in build_manifest(ModelConfig())}
    ablated_cfg = dataclasses.replace(ModelConfig(), fusion_stages=(4,),
                                      align_stages=(2, 4))
    ablated = {e.path for e in build_manifest(ablated_cfg)}
    assert "vision.stage1.fusion.attn1.q_proj.weight" in full
    assert "vision.stage1.fusion.attn1.q_proj.weight" not in ablated
    assert "vision.stage1.down.weight" in ablated  # bare downsampler stays
    assert "align.stage1.log_tau" not in ablated
    assert "align.stage2.log_tau" in ablated
    # stage-4 fusion keeps only the first attention pair (nothing to downsample)
    assert "vision.stage4.fusion.attn1.q_proj.weight" in ablated
    assert not any(p.startswith("vision.stage4.fusion.attn2") for p in full)
    # language fusion layers belong to the previous stage's fusion block
    assert "lang.stage2.fusion.attn.q_proj.weight" in full
    assert not any(p.startswith("lang.stage") and ".fusion" in p for p in ablated)


def test_vision_only_direction_drops_language_fusion():
    cfg = dataclasses.replace(ModelConfig(), fusion_direction="vision_only")
    paths = {e.path for e in build_manifest(cfg)}
    assert not any(p.startswith("lang.") and ".fusion." in p for p in paths)
    assert "vision.stage2.fusion.attn1.q_proj.weight" in paths


def test_auxiliary_mode_adds_side_heads():
    cfg = dataclasses.replace(ModelConfig(), loss_mode="auxiliary")
    paths = {e.path for e in build_manifest(cfg)}
    for i in range(1, 5):
        assert f"aux.stage{i}.weight" in paths
    assert not any(p.startswith("aux.") for p in build_manifest(ModelConfig())
                   if isinstance(p, str))


def test_invalid_config_raises_naming_violation():
    with pytest.raises(ConfigError, match="resolution chain"):
        build_manifest(dataclasses.replace(ModelConfig(), image_size=60))


def test_param_count_matches_hand_derived_spreadsheet():
    """The committed spreadsheet was derived from closed-form layer formulas,
    independently of build_manifest."""
    path = Path(__file__).parent / "data" / "param_counts_default.csv"
    with open(path) as fh:
        rows = [r for r in csv.reader(fh)
                if r and not r[0].startswith("#") and r[0] != "group"]
    expected_total = sum(int(r[2]) for r in rows)
    params = init_params(ModelConfig(), seed=0)
    assert params.total_count() == expected_total
