"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, export-embeddings, render-masks,
pr-curve.  Every model/training config field is mirrored as a flag
(underscores become dashes); `--config FILE` loads the same flat key=value
format that checkpoints embed, and explicit flags win over the file.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .ablation import GRIDS, render_table, run_ablation_suite, write_table_csv
from .alignment import downsample_labels, export_embeddings, project_features
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ModelConfig, _field_base_type, _parse_value, config_from_kv,
                     config_to_kv, require_valid)
from .decoder import predict_mask
from .errors import RefsegError, UsageError
from .metrics import write_pr_csv, write_report
from .pipeline import forward_pipeline
from .synthdata import generate_dataset, load_dataset, save_dataset, split_dataset
from .train import (TrainConfig, evaluate_model, prepare_samples, train,
                    write_epoch_log)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); remap to usage error
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(parser: argparse.ArgumentParser, cls) -> None:
    for f in dataclasses.fields(cls):
        flag = f"--{f.name.replace('_', '-')}"
        if flag in parser._option_string_actions:
            continue  # ablation overrides share names with ModelConfig fields
        parser.add_argument(flag, dest=f"cfgfield_{f.name}", metavar="V",
                            default=None, help=f"config field {f.name}")


def _collect_config(args, cls, base=None):
    values = {}
    if base is not None:
        values.update(dataclasses.asdict(base))
    for f in dataclasses.fields(cls):
        raw = getattr(args, f"cfgfield_{f.name}", None)
        if raw is not None:
            values[f.name] = _parse_value(raw, _field_base_type(f))
    known = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in known})


def _load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    text = Path(path).read_text(encoding="utf-8")
    return (config_from_kv(text, ModelConfig, strict=False),
            config_from_kv(text, TrainConfig, strict=False))


def _configs_from_args(args) -> tuple[ModelConfig, TrainConfig]:
    base_model, base_train = (None, None)
    if getattr(args, "config", None):
        base_model, base_train = _load_config_file(args.config)
    model_cfg = _collect_config(args, ModelConfig, base_model)
    train_cfg = _collect_config(args, TrainConfig, base_train)
    return model_cfg, train_cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="refseg",
                     description="Referring-expression segmentation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)

    def training_flags(p):
        p.add_argument("--config", help="key=value config file")
        _add_config_flags(p, ModelConfig)
        _add_config_flags(p, TrainConfig)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="held-out fraction evaluated after training (0 disables)")
    p.add_argument("--split-seed", type=int, default=0)
    training_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for report files (defaults to stdout only)")
    p.add_argument("--pr", action="store_true", help="also compute the PR curve")

    p = sub.add_parser("ablate", help="train and compare a grid of ablation cells")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", choices=sorted(GRIDS), default="main")
    p.add_argument("--seeds", default="0", help="comma-separated init/data seeds")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)
    training_flags(p)

    p = sub.add_parser("export-embeddings",
                       help="dump per-stage alignment embeddings as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render-masks", help="write predicted masks as 1-bit PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("pr-curve", help="write the pixel-level PR curve as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-thresholds", type=int, default=101)
    return parser


def _cmd_gen_data(args) -> int:
    scenes = generate_dataset(args.count, args.seed, args.image_size)
    save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    model_cfg, train_cfg = _configs_from_args(args)
    require_valid(model_cfg)
    scenes = load_dataset(args.data)
    if args.val_fraction > 0:
        train_scenes, val_scenes = split_dataset(scenes, args.val_fraction,
                                                 args.split_seed)
    else:
        train_scenes, val_scenes = scenes, []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"epoch {row.epoch:3d}  step {row.step:5d}  lr {row.lr:.3e}  "
              f"task {row.l_task:.4f}  side {row.l_align:.4f}  "
              f"total {row.l_total:.4f}  train mIoU {row.train_miou:.4f}")

    result = train(train_cfg, model_cfg, train_scenes,
                   log_path=out / "epochs.csv", progress=progress)
    save_checkpoint(out / "checkpoint.ckpt", result)
    (out / "config.kv").write_text(config_to_kv(result.cfg)
                                   + config_to_kv(result.train_cfg), encoding="utf-8")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    if val_scenes:
        report, _ = evaluate_model(result.cfg, result.params, val_scenes)
        print(report.to_text(), end="")
        write_report(report, out, prefix="val_report")
    return 0


def _cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.data)
    report, _ = evaluate_model(ck.cfg, ck.params, scenes, with_pr=args.pr)
    print(report.to_text(), end="")
    if args.out:
        write_report(report, args.out)
        print(f"report files in {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    model_cfg, train_cfg = _configs_from_args(args)
    require_valid(model_cfg)
    scenes = load_dataset(args.data)
    train_scenes, val_scenes = split_dataset(scenes, args.val_fraction,
                                             args.split_seed)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise UsageError("--seeds needs at least one integer")
    cells = GRIDS[args.grid]()

    def progress(name, seed, miou):
        print(f"cell {name:<16} seed {seed}  val mIoU {miou:.4f}")

    results = run_ablation_suite(cells, seeds, model_cfg, train_cfg,
                                 train_scenes, val_scenes, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(results)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    write_table_csv(results, out / "ablation.csv")
    print(table, end="")
    return 0


def _cmd_export_embeddings(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.data)
    samples = prepare_samples(ck.cfg, scenes)

    def rows():
        with ad.no_grad():
            for sid, s in enumerate(samples):
                out = forward_pipeline(ck.cfg, ck.params, s.image, s.token_ids,
                                       s.padding)
                labels = downsample_labels(s.gt_mask, ck.cfg)
                for i in ck.cfg.align_stages:
                    st = out.stages[i]
                    z_v, z_l = project_features(ck.cfg, ck.params, i, st.v, st.cls)
                    yield sid, i, z_v.data, z_l.data, labels.flat(i)

    count = export_embeddings(args.out, rows(), ck.cfg.align_dim)
    print(f"wrote {count} rows to {args.out}")
    return 0


def _cmd_render_masks(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.data)
    samples = prepare_samples(ck.cfg, scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        for sid, s in enumerate(samples):
            res = forward_pipeline(ck.cfg, ck.params, s.image, s.token_ids,
                                   s.padding)
            mask = predict_mask(res.logits, args.threshold)
            img = Image.fromarray((mask.astype(np.uint8) * 255), mode="L").convert("1")
            img.save(out / f"{sid:04d}.png")
    print(f"wrote {len(samples)} masks to {out}")
    return 0


def _cmd_pr_curve(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.data)
    report, _ = evaluate_model(ck.cfg, ck.params, scenes, with_pr=True,
                               num_thresholds=args.num_thresholds)
    write_pr_csv(report.pr_curve, args.out)
    print(f"wrote {len(report.pr_curve)} PR points to {args.out} "
          "(pixel-level, micro-averaged)")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "export-embeddings": _cmd_export_embeddings,
    "render-masks": _cmd_render_masks,
    "pr-curve": _cmd_pr_curve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except RefsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
