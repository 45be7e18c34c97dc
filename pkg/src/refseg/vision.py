"""Stage-divided vision encoder.

An image is cut into non-overlapping patches, projected, and pushed through
four stages.  Each stage runs its self-attention blocks to produce the stage
features V_i, then a vision-query fusion layer attends from those features
onto the language sequence twice: once at the stage resolution and once after
an internal 2x downsampling (patch merging), so the next stage starts from
language-aware features at the new width.  The final stage skips the second
attention because nothing consumes its downsampled output.

Residual targets inside the fusion layer are deliberately non-standard: both
the first feed-forward and the first attention add back V_i itself, and the
post-downsampling pair adds back the downsampled features, not the
intermediate sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .attention import AttentionSpec, FFNSpec, ffn, mhca, self_attention_block
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError, UsageError
from .params import Params


@lru_cache(maxsize=None)
def _patch_indices(image_size: int, patch: int) -> np.ndarray:
    """Flat pixel indices of each patch row: (num_patches, 3*patch*patch).

    Patches are taken row-major over the grid; within a patch the layout is
    (channel, dy, dx), matching the patch-projection weight rows.
    """
    grid = image_size // patch
    c_idx, y_idx, x_idx = np.meshgrid(np.arange(3), np.arange(patch),
                                      np.arange(patch), indexing="ij")
    inner = (c_idx * image_size * image_size + y_idx * image_size + x_idx).reshape(-1)
    rows = []
    for gy in range(grid):
        for gx in range(grid):
            origin = gy * patch * image_size + gx * patch
            rows.append(origin + inner)
    return np.stack(rows)


@lru_cache(maxsize=None)
def _merge_indices(h: int, w: int, c: int) -> np.ndarray:
    """Gather map for 2x2 patch merging on an (h*w, c) feature map.

    Output row (i, j) concatenates the four neighbors in the fixed order
    top-left, top-right, bottom-left, bottom-right, each contributing its
    full channel block.
    """
    base = np.arange(h * w * c).reshape(h, w, c)
    tl = base[0::2, 0::2, :]
    tr = base[0::2, 1::2, :]
    bl = base[1::2, 0::2, :]
    br = base[1::2, 1::2, :]
    stacked = np.concatenate([tl, tr, bl, br], axis=-1)  # (h/2, w/2, 4c)
    return stacked.reshape((h // 2) * (w // 2), 4 * c)


def patch_embed(cfg: ModelConfig, p: Params, image: np.ndarray) -> Tensor:
    """Project an image (3, S, S) with values in [0, 1] to (H1*W1, C1) tokens."""
    image = np.asarray(image, dtype=np.float64)
    s = cfg.image_size
    if image.shape != (3, s, s):
        raise ShapeError(f"expected image of shape (3, {s}, {s}), got {image.shape}")
    idx = _patch_indices(s, cfg.patch_size)
    patches = ad.take_flat(Tensor(image), idx, idx.shape)
    tokens = ad.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
    return ad.add(tokens, p["patch_embed.pos"])


def patch_merge(p: Params, prefix: str, x: Tensor, h: int, w: int) -> Tensor:
    """Concatenate 2x2 neighbors and project 4C -> C_next, halving resolution."""
    if h % 2 or w % 2:
        raise ShapeError(f"cannot merge odd feature map {h}x{w}")
    n, c = x.shape
    if n != h * w:
        raise ShapeError(f"feature rows {n} != {h}x{w}")
    gathered = ad.take_flat(x, _merge_indices(h, w, c), (h // 2 * (w // 2), 4 * c))
    return ad.linear(gathered, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


@dataclass
class VisionStageOutput:
    v: Tensor            # pre-fusion stage features (H_i*W_i, C_i)
    m_hat: Tensor        # first-attention features kept for the decoder
    m: Tensor            # language-aware stage features
    f_v: Tensor | None   # downsampled output for the next stage (None at stage 4)
    h: int
    w: int


def vision_stage_forward(cfg: ModelConfig, p: Params, stage: int, x_in: Tensor,
                         lang: Tensor | None, lang_padding: np.ndarray | None,
                         attn_sink: list | None = None) -> VisionStageOutput:
    """Run vision stage `stage` (1-indexed) on tokens `x_in` of shape (H_i*W_i, C_i).

    With fusion enabled the stage needs the current language features; with it
    disabled the fusion layer is bypassed entirely and only the bare
    downsampler runs, so the outputs cannot depend on the language input.
    """
    i = stage
    c = cfg.vision_channels[i - 1]
    heads = cfg.vision_heads[i - 1]
    h = w = cfg.stage_resolution(i)
    if x_in.shape != (h * w, c):
        raise ShapeError(f"vision stage {i}: expected ({h * w}, {c}), got {x_in.shape}")
    fused = i in cfg.fusion_stages
    if fused and lang is None:
        raise UsageError(f"vision stage {i}: fusion enabled but no language features given")

    x = x_in
    for k in range(1, cfg.vision_depths[i - 1] + 1):
        x = self_attention_block(p, f"vision.stage{i}.block{k}", heads, x,
                                 attn_sink=attn_sink)
    v = x

    last = i == cfg.num_stages
    if not fused:
        f_v = None if last else patch_merge(p, f"vision.stage{i}.down", v, h, w)
        return VisionStageOutput(v=v, m_hat=v, m=v, f_v=f_v, h=h, w=w)

    sp = f"vision.stage{i}.fusion"
    d = cfg.lang_dim
    m_hat = ad.add(mhca(AttentionSpec(c, heads, d), p, f"{sp}.attn1", v, lang,
                        key_padding=lang_padding, attn_sink=attn_sink), v)
    m = ad.add(ffn(FFNSpec(c), p, f"{sp}.ffn1", m_hat), v)
    if last:
        return VisionStageOutput(v=v, m_hat=m_hat, m=m, f_v=None, h=h, w=w)

    c_next = cfg.vision_channels[i]
    down = patch_merge(p, f"vision.stage{i}.down", m, h, w)
    f_hat = ad.add(mhca(AttentionSpec(c_next, heads, d), p, f"{sp}.attn2", down, lang,
                        key_padding=lang_padding, attn_sink=attn_sink), down)
    f_v = ad.add(ffn(FFNSpec(c_next), p, f"{sp}.ffn2", f_hat), down)
    return VisionStageOutput(v=v, m_hat=m_hat, m=m, f_v=f_v, h=h, w=w)
