"""Segmentation evaluation: oIoU, mIoU, precision@threshold, PR curves.

All statistics are accumulated as exact integer pixel counts and divided only
at the end, so results are reproducible bit-for-bit and can be checked against
a naive counting oracle.  oIoU pools intersections and unions over the whole
dataset before dividing; mIoU averages per-sample ratios; P@t counts samples
whose IoU strictly exceeds the threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, UsageError

PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class EvalReport:
    oiou: float
    miou: float
    precision_at: dict[float, float]
    sample_ious: list[float]
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list)

    def to_kv(self) -> str:
        lines = [f"oiou = {self.oiou!r}", f"miou = {self.miou!r}",
                 f"samples = {len(self.sample_ious)}"]
        for t in sorted(self.precision_at):
            lines.append(f"p_at_{t} = {self.precision_at[t]!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = ["evaluation report",
                 "-----------------",
                 f"samples          {len(self.sample_ious):>10d}",
                 f"oIoU             {self.oiou:>10.4f}",
                 f"mIoU             {self.miou:>10.4f}"]
        for t in sorted(self.precision_at):
            lines.append(f"P@{t:<3}            {self.precision_at[t]:>10.4f}")
        return "\n".join(lines) + "\n"


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; both-empty counts as 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def evaluate(predictions: list[np.ndarray], gts: list[np.ndarray],
             prob_maps: list[np.ndarray] | None = None,
             num_thresholds: int = 101) -> EvalReport:
    """Aggregate metrics over aligned prediction/ground-truth lists."""
    if not predictions or len(predictions) != len(gts):
        raise UsageError(
            f"need equal-length nonempty lists, got {len(predictions)} predictions "
            f"and {len(gts)} ground truths")
    inter_total = 0
    union_total = 0
    sample_ious: list[float] = []
    for pred, gt in zip(predictions, gts):
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        inter = int(np.logical_and(pred, gt).sum())
        union = int(np.logical_or(pred, gt).sum())
        inter_total += inter
        union_total += union
        sample_ious.append(1.0 if union == 0 else inter / union)
    oiou = 1.0 if union_total == 0 else inter_total / union_total
    # fsum keeps the mean exactly permutation-invariant
    miou = math.fsum(sample_ious) / len(sample_ious)
    precision_at = {t: sum(v > t for v in sample_ious) / len(sample_ious)
                    for t in PRECISION_THRESHOLDS}
    curve = pr_curve(prob_maps, gts, num_thresholds) if prob_maps is not None else []
    return EvalReport(oiou=oiou, miou=miou, precision_at=precision_at,
                      sample_ious=sample_ious, pr_curve=curve)


def pr_curve(prob_maps: list[np.ndarray], gts: list[np.ndarray],
             num_thresholds: int = 101) -> list[tuple[float, float, float]]:
    """Pixel-level (micro-averaged) precision/recall over evenly spaced
    probability thresholds; precision with zero predicted positives is 1."""
    if len(prob_maps) != len(gts):
        raise UsageError("prob_maps and gts must align")
    thresholds = np.linspace(0.0, 1.0, num_thresholds)
    tp = np.zeros(num_thresholds, dtype=np.int64)
    fp = np.zeros(num_thresholds, dtype=np.int64)
    fn = np.zeros(num_thresholds, dtype=np.int64)
    for probs, gt in zip(prob_maps, gts):
        probs = np.asarray(probs, dtype=np.float64)
        gt = np.asarray(gt, dtype=bool)
        if probs.shape != gt.shape:
            raise ShapeError(f"probability map {probs.shape} vs mask {gt.shape}")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise UsageError("probabilities must lie in [0, 1]")
        for k, t in enumerate(thresholds):
            pred = probs > t
            tp[k] += int(np.logical_and(pred, gt).sum())
            fp[k] += int(np.logical_and(pred, ~gt).sum())
            fn[k] += int(np.logical_and(~pred, gt).sum())
    curve = []
    for k, t in enumerate(thresholds):
        predicted = int(tp[k] + fp[k])
        actual = int(tp[k] + fn[k])
        precision = 1.0 if predicted == 0 else int(tp[k]) / predicted
        recall = 1.0 if actual == 0 else int(tp[k]) / actual
        curve.append((float(t), precision, recall))
    return curve


def write_pr_csv(curve: list[tuple[float, float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, prec, rec in curve:
            writer.writerow([repr(t), repr(prec), repr(rec)])


def write_report(report: EvalReport, out_dir, prefix: str = "report") -> None:
    """Write the aligned-text and key=value renderings (plus PR CSV if any)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{prefix}.txt").write_text(report.to_text(), encoding="utf-8")
    (out / f"{prefix}.kv").write_text(report.to_kv(), encoding="utf-8")
    if report.pr_curve:
        write_pr_csv(report.pr_curve, out / "pr_curve.csv")
