"""Segmentation decoder, mask prediction, and the loss composition.

Three decoder blocks walk back up the feature pyramid: starting from the
final stage's fused features, each block bilinearly doubles the resolution,
concatenates the matching stage's fused features, and applies two rounds of
3x3 convolution + per-channel normalization + ReLU.  A 1x1 convolution then
produces one logit per position and a final bilinear upsample restores the
input resolution, where the binary cross-entropy task loss is computed
against the unmodified ground truth.

Normalization uses batch-style per-channel statistics gathered over the
positions of the current sample while training, with exponential running
estimates that are frozen for evaluation.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError
from .params import Params

BN_EPS = 1e-5
PROB_CLAMP = 1e-7


@lru_cache(maxsize=None)
def _im2col_indices(h: int, w: int, c: int) -> np.ndarray:
    """Flat gather map from a zero-padded (h+2, w+2, c) array to 3x3 patches.

    Row (i, j) lists the 9*c source elements of the window centered at
    (i, j), ordered (dy, dx, channel) row-major.
    """
    padded = np.arange((h + 2) * (w + 2) * c).reshape(h + 2, w + 2, c)
    rows = []
    for i in range(h):
        for j in range(w):
            rows.append(padded[i:i + 3, j:j + 3, :].reshape(-1))
    return np.stack(rows)


@lru_cache(maxsize=None)
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear interpolation matrix with half-pixel-center sampling."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        w[i, lo_c] += 1.0 - frac
        w[i, hi_c] += frac
    return w


def conv3x3(p: Params, prefix: str, x: Tensor, h: int, w: int) -> Tensor:
    """3x3 convolution with padding 1 on (h*w, c_in) features -> (h*w, c_out)."""
    n, c = x.shape
    if n != h * w:
        raise ShapeError(f"{prefix}: rows {n} != {h}x{w}")
    padded = ad.pad2d(ad.reshape(x, (h, w, c)), 1)
    idx = _im2col_indices(h, w, c)
    cols = ad.take_flat(padded, idx, idx.shape)
    return ad.linear(cols, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def conv1x1(p: Params, prefix: str, x: Tensor) -> Tensor:
    return ad.linear(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def batch_norm(p: Params, prefix: str, x: Tensor) -> Tensor:
    """Per-channel standardization over the sample's positions, then a
    learned scale and shift.

    The statistics always come from the tensor being normalized, so training
    and evaluation compute the same pure function of the input (the per-
    sample counterpart of batch statistics; with single-sample gradient
    accumulation there is no cross-sample batch to pool and experiments with
    frozen running estimates failed to train).
    """
    m = ad.tmean(x, axis=0, keepdims=True)
    centered = ad.sub(x, m)
    var = ad.tmean(ad.mul(centered, centered), axis=0, keepdims=True)
    scaled = ad.div(centered, ad.sqrt(ad.add(var, BN_EPS)))
    return ad.add(ad.mul(scaled, p[f"{prefix}.gain"]), p[f"{prefix}.bias"])


def bilinear_upsample(x: Tensor, h: int, w: int, factor: int) -> Tensor:
    """Bilinear resize of (h*w, c) features by an integer factor."""
    n, c = x.shape
    if n != h * w:
        raise ShapeError(f"upsample: rows {n} != {h}x{w}")
    wh = _interp_matrix(h * factor, h)
    ww_t = _interp_matrix(w * factor, w).T
    chw = ad.transpose(ad.reshape(x, (h, w, c)), (2, 0, 1))
    out = ad.matmul(ad.matmul(wh, chw), ww_t)            # (c, h*f, w*f)
    return ad.reshape(ad.transpose(out, (1, 2, 0)), (h * factor * w * factor, c))


def decoder_block(p: Params, prefix: str, x: Tensor, h: int, w: int) -> Tensor:
    for unit in (1, 2):
        x = conv3x3(p, f"{prefix}.conv{unit}", x, h, w)
        x = batch_norm(p, f"{prefix}.bn{unit}", x)
        x = ad.relu(x)
    return x


def decode(cfg: ModelConfig, p: Params, m_hats: dict[int, Tensor]) -> Tensor:
    """Fuse the four per-stage feature maps into full-resolution mask logits.

    Starts at the coarsest stage and repeatedly upsamples 2x, concatenates the
    next-finer stage's features, and applies a decoder block; a 1x1 head and a
    final upsample by the patch size yield logits of shape (S, S).
    """
    for i in cfg.stages:
        if i not in m_hats:
            raise ShapeError(f"decoder: missing stage-{i} features")
        res = cfg.stage_resolution(i)
        want = (res * res, cfg.vision_channels[i - 1])
        if m_hats[i].shape != want:
            raise ShapeError(f"decoder: stage-{i} features {m_hats[i].shape} != {want}")

    x = m_hats[cfg.num_stages]
    h = w = cfg.stage_resolution(cfg.num_stages)
    for b in range(1, 4):
        x = bilinear_upsample(x, h, w, 2)
        h, w = h * 2, w * 2
        x = ad.concat([x, m_hats[cfg.num_stages - b]], axis=1)
        x = decoder_block(p, f"decoder.block{b}", x, h, w)
    logits = conv1x1(p, "decoder.head", x)               # (h*w, 1)
    logits = bilinear_upsample(logits, h, w, cfg.patch_size)
    s = cfg.image_size
    return ad.reshape(logits, (s, s))


def task_loss(logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all pixels, probabilities clamped."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {logits.shape} vs ground truth {gt.shape}")
    probs = ad.clip(ad.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.mul(ad.log(probs), gt)
    neg = ad.mul(ad.log(ad.sub(1.0, probs)), 1.0 - gt)
    return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)


def total_loss(l_task: Tensor, l_align: Tensor, lam: float) -> Tensor:
    """Task loss plus `lam` times the alignment (or side) loss."""
    return ad.add(l_task, ad.mul(l_align, lam))


def predict_mask(logits, threshold: float = 0.5) -> np.ndarray:
    """Binarize mask probabilities; strictly-greater comparison, no cleanup."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return expit(data) > threshold
