"""Training loop: decoupled-weight-decay Adam with polynomial LR decay.

The optimizer updates once per batch from per-sample gradient accumulation,
so results are bit-reproducible given the seeds and single-threaded math.
Weight decay is skipped for biases, normalization gains, and the alignment
temperatures.  The last partial batch of an epoch is kept, not dropped.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .alignment import downsample_labels
from .config import ModelConfig, require_valid
from .decoder import predict_mask
from .errors import NumericError, UsageError
from .metrics import EvalReport, evaluate, iou
from .params import Params, init_params
from .pipeline import LossReport, compute_losses, forward_pipeline
from .synthdata import Scene, build_vocab, tokenize

EPOCH_LOG_HEADER = ("epoch", "step", "lr", "L_task", "L_align", "L_total", "train_mIoU")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings plus optional architecture overrides.

    The override fields (fusion_stages .. loss_mode) are the ablation
    switchboard: when set they replace the corresponding `ModelConfig` fields
    before parameters are created, so one base config can express every
    ablation cell.
    """

    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 3e-4
    lr_power: float = 0.9
    weight_decay: float = 0.01
    data_seed: int = 0
    init_seed: int = 0
    fusion_stages: tuple[int, ...] | None = None
    align_stages: tuple[int, ...] | None = None
    fusion_direction: str | None = None
    lambda_align: float | None = None
    loss_mode: str | None = None

    def apply_overrides(self, cfg: ModelConfig) -> ModelConfig:
        changes = {}
        for name in ("fusion_stages", "align_stages", "fusion_direction",
                     "lambda_align", "loss_mode"):
            value = getattr(self, name)
            if value is not None:
                changes[name] = value
        return dataclasses.replace(cfg, **changes) if changes else cfg


def validate_train_config(tc: TrainConfig) -> list[str]:
    v = []
    if tc.epochs < 1:
        v.append(f"epochs: must be >= 1, got {tc.epochs}")
    if tc.batch_size < 1:
        v.append(f"batch_size: must be >= 1, got {tc.batch_size}")
    if tc.base_lr <= 0:
        v.append(f"base_lr: must be > 0, got {tc.base_lr}")
    if tc.lr_power < 0:
        v.append(f"lr_power: must be >= 0, got {tc.lr_power}")
    if tc.weight_decay < 0:
        v.append(f"weight_decay: must be >= 0, got {tc.weight_decay}")
    return v


def poly_lr(step: int, total_steps: int, base_lr: float, power: float) -> float:
    """base_lr * (1 - step/total_steps)**power, reaching 0 at the last step."""
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


class AdamW:
    """Adam with decoupled weight decay over a `Params` map."""

    def __init__(self, params: Params, weight_decay: float):
        self.params = params
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for entry in params.manifest:
            self.m[entry.path] = np.zeros(entry.shape)
            self.v[entry.path] = np.zeros(entry.shape)

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        """Apply one update from the gradients stored on the parameters.

        Parameters whose gradient is None (structurally unused layers) are
        left untouched.
        """
        self.step_count += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.step_count
        bc2 = 1.0 - ADAM_BETA2 ** self.step_count
        for entry in self.params.manifest:
            t = self.params[entry.path]
            if t.grad is None:
                continue
            g = t.grad * grad_scale
            m = self.m[entry.path]
            v = self.v[entry.path]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            if entry.decayed and self.weight_decay > 0.0:
                update = update + self.weight_decay * t.data
            t.data -= lr * update


@dataclass
class EpochRow:
    epoch: int
    step: int
    lr: float
    l_task: float
    l_align: float
    l_total: float
    train_miou: float

    def as_csv(self) -> list[str]:
        return [str(self.epoch), str(self.step), repr(self.lr), repr(self.l_task),
                repr(self.l_align), repr(self.l_total), repr(self.train_miou)]


@dataclass
class TrainResult:
    cfg: ModelConfig
    train_cfg: TrainConfig
    params: Params
    optimizer: AdamW
    epoch_log: list[EpochRow]
    total_steps: int

    @property
    def rng_state(self) -> dict:
        return {"data_seed": self.train_cfg.data_seed,
                "epochs_run": len(self.epoch_log), "step": self.optimizer.step_count}


@dataclass
class PreparedSample:
    image: np.ndarray
    token_ids: np.ndarray
    padding: np.ndarray
    gt_mask: np.ndarray
    labels: object


def prepare_samples(cfg: ModelConfig, scenes: list[Scene]) -> list[PreparedSample]:
    vocab = build_vocab()
    out = []
    for scene in scenes:
        ids, padding = tokenize(vocab, scene.expression, cfg.max_tokens)
        out.append(PreparedSample(scene.image, ids, padding, scene.gt_mask,
                                  downsample_labels(scene.gt_mask, cfg)))
    return out


def write_epoch_log(rows: list[EpochRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_LOG_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, scenes: list[Scene],
          log_path=None, progress=None) -> TrainResult:
    """Train from scratch on `scenes`; returns parameters, optimizer state,
    and the per-epoch log.

    The logged train mIoU comes from the training-mode forward passes of the
    epoch (so it trails the final parameters slightly); evaluate separately
    for a converged figure.  A non-finite loss aborts with a dump of the
    offending batch.
    """
    if not scenes:
        raise UsageError("training needs a nonempty dataset")
    problems = validate_train_config(train_cfg)
    if problems:
        raise UsageError("; ".join(problems))
    cfg = train_cfg.apply_overrides(model_cfg)
    require_valid(cfg)
    params = init_params(cfg, train_cfg.init_seed)
    optimizer = AdamW(params, train_cfg.weight_decay)
    samples = prepare_samples(cfg, scenes)

    n = len(samples)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch
    epoch_log: list[EpochRow] = []
    step = 0
    lr = train_cfg.base_lr

    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.data_seed, epoch]).permutation(n)
        sums = np.zeros(3)
        iou_sum = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            batch = order[lo:lo + train_cfg.batch_size]
            params.zero_grads()
            reports: list[LossReport] = []
            for idx in batch:
                s = samples[idx]
                out = forward_pipeline(cfg, params, s.image, s.token_ids,
                                       s.padding)
                loss, report = compute_losses(cfg, params, out, s.gt_mask, s.labels)
                if not np.isfinite(report.total):
                    raise NumericError(
                        "non-finite loss at epoch "
                        f"{epoch} step {step}; batch samples {batch.tolist()}; "
                        f"reports {[r.row() for r in reports] + [report.row()]}")
                loss.backward()
                reports.append(report)
                iou_sum += iou(predict_mask(out.logits), s.gt_mask)
            lr = poly_lr(step, total_steps, train_cfg.base_lr, train_cfg.lr_power)
            optimizer.step(lr, grad_scale=1.0 / len(batch))
            step += 1
            for r in reports:
                sums += r.row()
        row = EpochRow(epoch=epoch, step=step, lr=float(lr),
                       l_task=float(sums[0] / n), l_align=float(sums[1] / n),
                       l_total=float(sums[2] / n), train_miou=float(iou_sum / n))
        epoch_log.append(row)
        if progress is not None:
            progress(row)

    if log_path is not None:
        write_epoch_log(epoch_log, log_path)
    return TrainResult(cfg=cfg, train_cfg=train_cfg, params=params,
                       optimizer=optimizer, epoch_log=epoch_log,
                       total_steps=total_steps)


def evaluate_model(cfg: ModelConfig, params: Params, scenes: list[Scene],
                   num_thresholds: int = 101,
                   with_pr: bool = False) -> tuple[EvalReport, list[np.ndarray]]:
    """Eval-mode predictions over `scenes`; returns (report, probability maps)."""
    if not scenes:
        raise UsageError("evaluation needs a nonempty dataset")
    samples = prepare_samples(cfg, scenes)
    preds, probs, gts = [], [], []
    with ad.no_grad():
        for s in samples:
            out = forward_pipeline(cfg, params, s.image, s.token_ids, s.padding)
            probs.append(expit(out.logits.data))
            preds.append(predict_mask(out.logits))
            gts.append(s.gt_mask)
    report = evaluate(preds, gts, prob_maps=probs if with_pr else None,
                      num_thresholds=num_thresholds)
    return report, probs
