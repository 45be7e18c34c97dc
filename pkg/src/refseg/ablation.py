"""Ablation switchboard: train a grid of architecture variants and tabulate.

Every cell trains on the same split with the same seeds, differing only in
the switches it carries (fusion stage subset, alignment stage subset,
fusion direction, loss weighting, alignment-vs-auxiliary side loss), so score
differences are attributable to the switches.  Results report mean and range
over the seeds; a failing cell is marked and the suite continues.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

from .config import ModelConfig
from .synthdata import Scene
from .train import TrainConfig, evaluate_model, train


@dataclass(frozen=True)
class AblationCell:
    name: str
    fusion_stages: tuple[int, ...] | None = None
    align_stages: tuple[int, ...] | None = None
    fusion_direction: str | None = None
    lambda_align: float | None = None
    loss_mode: str | None = None

    def train_config(self, base: TrainConfig, init_seed: int, data_seed: int) -> TrainConfig:
        return dataclasses.replace(
            base, init_seed=init_seed, data_seed=data_seed,
            fusion_stages=self.fusion_stages, align_stages=self.align_stages,
            fusion_direction=self.fusion_direction, lambda_align=self.lambda_align,
            loss_mode=self.loss_mode)


def main_grid() -> list[AblationCell]:
    """Align/fusion on-off grid; the no-fusion baseline keeps stage-4 fusion."""
    return [
        AblationCell("baseline", fusion_stages=(4,), align_stages=(), lambda_align=0.0),
        AblationCell("align_only", fusion_stages=(4,)),
        AblationCell("fusion_only", align_stages=(), lambda_align=0.0),
        AblationCell("align_fusion", ),
    ]


def stage_subset_grid(kind: str) -> list[AblationCell]:
    """Incremental stage subsets: fusion only, alignment only, or both."""
    subsets = [(4,), (3, 4), (2, 3, 4), (1, 2, 3, 4)]
    cells = []
    for subset in subsets:
        label = "".join(str(s) for s in subset)
        if kind == "fusion":
            cells.append(AblationCell(f"fusion_{label}", fusion_stages=subset,
                                      align_stages=(), lambda_align=0.0))
        elif kind == "align":
            cells.append(AblationCell(f"align_{label}", fusion_stages=(4,),
                                      align_stages=subset))
        else:
            cells.append(AblationCell(f"both_{label}", fusion_stages=subset,
                                      align_stages=subset))
    return cells


def direction_grid() -> list[AblationCell]:
    """Uni/bi fusion crossed with alignment on/off (all stages fused)."""
    return [
        AblationCell("uni_no_align", fusion_direction="vision_only",
                     align_stages=(), lambda_align=0.0),
        AblationCell("uni_align", fusion_direction="vision_only"),
        AblationCell("bi_no_align", align_stages=(), lambda_align=0.0),
        AblationCell("bi_align", ),
    ]


def loss_grid() -> list[AblationCell]:
    """Side-loss comparison at all stages: contrastive vs plain auxiliary BCE."""
    return [
        AblationCell("auxiliary_loss", loss_mode="auxiliary"),
        AblationCell("alignment_loss", loss_mode="alignment"),
    ]


def acceptance_grid() -> list[AblationCell]:
    """The directional-ordering cells: full > bi w/o align > uni w/o align,
    with the stage-4-only no-alignment baseline as the reference point."""
    return [
        AblationCell("full", ),
        AblationCell("bi_no_align", align_stages=(), lambda_align=0.0),
        AblationCell("uni_no_align", fusion_direction="vision_only",
                     align_stages=(), lambda_align=0.0),
        AblationCell("baseline", fusion_stages=(4,), align_stages=(), lambda_align=0.0),
    ]


GRIDS = {
    "main": main_grid,
    "fusion-stages": lambda: stage_subset_grid("fusion"),
    "align-stages": lambda: stage_subset_grid("align"),
    "both-stages": lambda: stage_subset_grid("both"),
    "direction": direction_grid,
    "loss": loss_grid,
    "acceptance": acceptance_grid,
}


@dataclass
class CellResult:
    cell: AblationCell
    miou_by_seed: dict[int, float] = field(default_factory=dict)
    oiou_by_seed: dict[int, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def mean_miou(self) -> float | None:
        if not self.miou_by_seed:
            return None
        return sum(self.miou_by_seed.values()) / len(self.miou_by_seed)

    @property
    def miou_range(self) -> float | None:
        if not self.miou_by_seed:
            return None
        vals = list(self.miou_by_seed.values())
        return max(vals) - min(vals)

    @property
    def mean_oiou(self) -> float | None:
        if not self.oiou_by_seed:
            return None
        return sum(self.oiou_by_seed.values()) / len(self.oiou_by_seed)


def run_ablation_suite(cells: list[AblationCell], seeds: list[int],
                       model_cfg: ModelConfig, base_train: TrainConfig,
                       train_scenes: list[Scene], val_scenes: list[Scene],
                       progress=None) -> list[CellResult]:
    """Train every (cell, seed) pair on the shared split and evaluate on val."""
    results = []
    for cell in cells:
        result = CellResult(cell)
        for seed in seeds:
            tc = cell.train_config(base_train, init_seed=seed, data_seed=seed)
            try:
                run = train(tc, model_cfg, train_scenes)
                report, _ = evaluate_model(run.cfg, run.params, val_scenes)
            except Exception as e:  # cell failures must not kill the suite
                result.error = f"seed {seed}: {type(e).__name__}: {e}"
                break
            result.miou_by_seed[seed] = report.miou
            result.oiou_by_seed[seed] = report.oiou
            if progress is not None:
                progress(cell.name, seed, report.miou)
        results.append(result)
    return results


def render_table(results: list[CellResult]) -> str:
    lines = [f"{'cell':<16} {'val mIoU':>20} {'val oIoU':>10}  seeds"]
    lines.append("-" * len(lines[0]))
    for r in results:
        if r.error is not None:
            lines.append(f"{r.cell.name:<16} {'FAILED':>20} {'-':>10}  {r.error}")
            continue
        seeds = ",".join(str(s) for s in sorted(r.miou_by_seed))
        miou = f"{r.mean_miou:.4f} +- {r.miou_range / 2:.4f}"
        lines.append(f"{r.cell.name:<16} {miou:>20} {r.mean_oiou:>10.4f}  {seeds}")
    return "\n".join(lines) + "\n"


def write_table_csv(results: list[CellResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "seed", "val_miou", "val_oiou", "status"])
        for r in results:
            if r.error is not None:
                writer.writerow([r.cell.name, "", "", "", f"failed: {r.error}"])
            for seed in sorted(r.miou_by_seed):
                writer.writerow([r.cell.name, seed, repr(r.miou_by_seed[seed]),
                                 repr(r.oiou_by_seed[seed]), "ok"])
