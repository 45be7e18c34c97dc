"""Full forward pass: both encoders interleaved stage by stage, plus losses.

Execution order per sample: the language stack first produces L_1; then for
each stage i the vision encoder consumes L_i, and (below the final stage) its
downsampled output feeds language stage i+1 before vision stage i+1 runs.
The alignment projections always read the pre-fusion pair (V_i, CLS_i) so the
contrastive signal grounds exactly the features the fusion is about to mix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignment import (PixelLabelMap, downsample_labels, project_features,
                        stage_alignment_loss, total_alignment_loss)
from .autodiff import Tensor
from .config import ModelConfig
from .decoder import conv1x1, decode, task_loss, total_loss
from .language import cls_row, embed_tokens, language_stage_forward
from .params import Params
from .vision import patch_embed, vision_stage_forward


@dataclass
class StageFeatures:
    """Everything one stage exposes to alignment, the decoder, and inspection."""

    v: Tensor
    l: Tensor
    cls: Tensor
    m_hat: Tensor
    m: Tensor
    f_v: Tensor | None
    h: int
    w: int


@dataclass
class PipelineOutput:
    logits: Tensor                      # (S, S) mask logits
    stages: dict[int, StageFeatures]


@dataclass
class LossReport:
    """Scalar summary of one loss evaluation (floats, detached)."""

    task: float
    side_per_stage: dict[int, float]
    side_total: float
    total: float
    side_kind: str                      # "alignment" or "auxiliary"
    side_active: bool

    def row(self) -> tuple[float, float, float]:
        return self.task, self.side_total, self.total


def forward_pipeline(cfg: ModelConfig, p: Params, image: np.ndarray,
                     token_ids: np.ndarray, padding: np.ndarray,
                     attn_sink: list | None = None) -> PipelineOutput:
    """Run the whole model on one sample.

    `padding` is a boolean vector over token positions (True = [PAD]); it
    masks language keys everywhere language features are attended to.
    """
    padding = np.asarray(padding, dtype=bool)
    l_i = language_stage_forward(cfg, p, 1, embed_tokens(cfg, p, token_ids),
                                 None, padding, attn_sink=attn_sink)
    x = patch_embed(cfg, p, image)
    stages: dict[int, StageFeatures] = {}
    for i in cfg.stages:
        out = vision_stage_forward(cfg, p, i, x, l_i, padding, attn_sink=attn_sink)
        stages[i] = StageFeatures(v=out.v, l=l_i, cls=cls_row(l_i), m_hat=out.m_hat,
                                  m=out.m, f_v=out.f_v, h=out.h, w=out.w)
        if i < cfg.num_stages:
            l_i = language_stage_forward(cfg, p, i + 1, l_i, out.f_v, padding,
                                         attn_sink=attn_sink)
            x = out.f_v
    logits = decode(cfg, p, {i: s.m_hat for i, s in stages.items()})
    return PipelineOutput(logits=logits, stages=stages)


def side_losses(cfg: ModelConfig, p: Params, out: PipelineOutput,
                labels: PixelLabelMap) -> dict[int, Tensor]:
    """Per-stage auxiliary objective: contrastive alignment or side-head BCE."""
    losses: dict[int, Tensor] = {}
    for i in cfg.align_stages:
        st = out.stages[i]
        if cfg.loss_mode == "alignment":
            z_v, z_l = project_features(cfg, p, i, st.v, st.cls)
            tau = ad.exp(p[f"align.stage{i}.log_tau"])
            losses[i], _ = stage_alignment_loss(z_v, z_l, labels.flat(i), tau)
        else:
            side_logits = ad.reshape(conv1x1(p, f"aux.stage{i}", st.v), (st.h, st.w))
            losses[i] = task_loss(side_logits, labels.positive[i])
    return losses


def compute_losses(cfg: ModelConfig, p: Params, out: PipelineOutput,
                   gt_mask: np.ndarray,
                   labels: PixelLabelMap | None = None) -> tuple[Tensor, LossReport]:
    """Assemble the training objective; returns (scalar Tensor, detached report)."""
    if labels is None:
        labels = downsample_labels(gt_mask, cfg)
    l_task = task_loss(out.logits, gt_mask)
    per_stage = side_losses(cfg, p, out, labels)
    counts = {i: cfg.stage_tokens(i) for i in per_stage}
    l_side, active = total_alignment_loss(per_stage, counts, cfg.align_norm)
    l_total = total_loss(l_task, l_side, cfg.lambda_align)
    report = LossReport(
        task=l_task.item(),
        side_per_stage={i: t.item() for i, t in per_stage.items()},
        side_total=l_side.item(),
        total=l_total.item(),
        side_kind=cfg.loss_mode,
        side_active=active,
    )
    return l_total, report
