"""Per-stage text-to-pixel contrastive alignment.

Before each stage's fusion runs, the stage's vision features and the
sentence token are projected into a shared space.  Every pixel is scored by
temperature-scaled cosine similarity against the sentence vector and pays a
per-pixel sigmoid log-loss: pixels inside the referred region are pushed
toward the sentence embedding, all others away from it.  The per-pixel losses
are independent of each other, which is what distinguishes this loss from
softmax-style contrastive objectives.

Ground-truth masks reach stage resolution by area fraction: a coarse cell is
positive when at least half of its pixels are positive (ties count positive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError, UsageError
from .params import Params

NORM_EPS = 1e-8


@dataclass
class PixelLabelMap:
    """Boolean relevance maps per stage; True marks pixels of the target."""

    positive: dict[int, np.ndarray]  # stage -> (H_i, W_i) bool

    def flat(self, stage: int) -> np.ndarray:
        return self.positive[stage].reshape(-1)


def downsample_labels(gt_mask: np.ndarray, cfg: ModelConfig) -> PixelLabelMap:
    """Reduce a full-resolution binary mask to every stage's resolution."""
    gt = np.asarray(gt_mask)
    s = gt.shape[0]
    if gt.ndim != 2 or gt.shape[1] != s:
        raise ShapeError(f"ground-truth mask must be square, got {gt.shape}")
    positive: dict[int, np.ndarray] = {}
    for i in cfg.stages:
        res = cfg.stage_resolution(i)
        if s % res != 0:
            raise ShapeError(f"stage {i} resolution {res} does not divide mask size {s}")
        cell = s // res
        frac = gt.astype(np.float64).reshape(res, cell, res, cell).mean(axis=(1, 3))
        positive[i] = frac >= 0.5
    return PixelLabelMap(positive)


def project_features(cfg: ModelConfig, p: Params, stage: int,
                     v: Tensor, cls: Tensor) -> tuple[Tensor, Tensor]:
    """Affine-project stage features into the shared space: (z_V, z_L)."""
    if stage not in cfg.align_stages:
        raise UsageError(f"alignment not enabled for stage {stage}")
    sp = f"align.stage{stage}"
    z_v = ad.linear(v, p[f"{sp}.v_proj.weight"], p[f"{sp}.v_proj.bias"])
    z_l = ad.linear(cls, p[f"{sp}.l_proj.weight"], p[f"{sp}.l_proj.bias"])
    return z_v, z_l


def cosine_map(z_v: Tensor, z_l: Tensor) -> Tensor:
    """Cosine similarity of every pixel embedding against the sentence
    embedding, with norms floored by a small epsilon instead of erroring on
    zero vectors (which occur at zero-bias initialization)."""
    dots = ad.matmul(z_v, ad.transpose(z_l, (1, 0)))              # (N, 1)
    nv = ad.sqrt(ad.tsum(ad.mul(z_v, z_v), axis=1, keepdims=True))
    nl = ad.sqrt(ad.tsum(ad.mul(z_l, z_l), axis=1, keepdims=True))
    denom = ad.mul(ad.add(nv, NORM_EPS), ad.add(nl, NORM_EPS))
    return ad.reshape(ad.div(dots, denom), (z_v.shape[0],))


def stage_alignment_loss(z_v: Tensor, z_l: Tensor, positive: np.ndarray,
                         tau: Tensor) -> tuple[Tensor, Tensor]:
    """Contrastive loss of one stage.

    positive: flat boolean vector over the stage's pixels (True = relevant).
    tau: positive temperature Tensor (callers pass exp(log_tau)).
    Returns (mean loss over all pixels, per-pixel loss vector).
    """
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n = z_v.shape[0]
    if positive.shape[0] != n:
        raise ShapeError(f"label vector length {positive.shape[0]} != pixels {n}")
    scores = ad.div(cosine_map(z_v, z_l), tau)
    # -log(sigmoid(s)) == softplus(-s) for positives; -log(1-sigmoid(s)) ==
    # softplus(s) for negatives
    sign = np.where(positive, -1.0, 1.0)
    per_pixel = ad.softplus(ad.mul(scores, sign))
    return ad.tmean(per_pixel), per_pixel


def total_alignment_loss(stage_losses: dict[int, Tensor],
                         pixel_counts: dict[int, int],
                         norm: str = "per_stage_mean") -> tuple[Tensor, bool]:
    """Combine per-stage losses; returns (loss, active).

    `per_stage_mean` averages the per-stage means so every stage weighs
    equally; `global_pixel_mean` divides the pixel-loss total by the combined
    pixel count, letting high-resolution stages dominate.  With no enabled
    stages the loss is exactly zero and `active` is False.
    """
    if not stage_losses:
        return Tensor(0.0), False
    stages = sorted(stage_losses)
    if norm == "per_stage_mean":
        total = stage_losses[stages[0]]
        for i in stages[1:]:
            total = ad.add(total, stage_losses[i])
        return ad.mul(total, 1.0 / len(stages)), True
    if norm != "global_pixel_mean":
        raise UsageError(f"unknown alignment norm {norm!r}")
    whole = None
    for i in stages:
        part = ad.mul(stage_losses[i], float(pixel_counts[i]))
        whole = part if whole is None else ad.add(whole, part)
    return ad.mul(whole, 1.0 / sum(pixel_counts[i] for i in stages)), True


EXPORT_COLUMNS = ("sample_id", "stage", "pixel_index", "label")


def export_embeddings(path, samples, align_dim: int) -> int:
    """Write projected embeddings as tab-separated text; returns the row count.

    `samples` yields (sample_id, stage, z_v (N, D'), z_l (1, D'), positive (N,))
    tuples.  Each pixel becomes one row labeled relevant/irrelevant; the
    sentence embedding becomes one row with pixel_index "CLS" and label
    "language".
    """
    header = list(EXPORT_COLUMNS) + [f"d{k}" for k in range(align_dim)]
    rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for sample_id, stage, z_v, z_l, positive in samples:
            z_v = np.asarray(z_v, dtype=np.float64)
            z_l = np.asarray(z_l, dtype=np.float64).reshape(-1)
            positive = np.asarray(positive, dtype=bool).reshape(-1)
            for j in range(z_v.shape[0]):
                label = "relevant" if positive[j] else "irrelevant"
                coords = "\t".join(repr(x) for x in z_v[j])
                fh.write(f"{sample_id}\t{stage}\t{j}\t{label}\t{coords}\n")
                rows += 1
            coords = "\t".join(repr(x) for x in z_l)
            fh.write(f"{sample_id}\t{stage}\tCLS\tlanguage\t{coords}\n")
            rows += 1
    return rows
