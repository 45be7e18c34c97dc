"""CLI contract: subcommands, exit codes, config file handling."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from refseg.cli import main
from refseg.config import ModelConfig, config_to_kv
from refseg.train import TrainConfig

from conftest import micro_config, tiny_scenes


def digest_dir(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def micro_kv(tmp_path, **train_overrides) -> Path:
    """Write a config file holding the micro model plus tiny train settings."""
    text = config_to_kv(micro_config())
    tc = TrainConfig(epochs=1, batch_size=2, **train_overrides)
    text += config_to_kv(tc)
    path = tmp_path / "config.kv"
    path.write_text(text, encoding="utf-8")
    return path


def tiny_dataset_dir(tmp_path, n=6, seed=41) -> Path:
    from refseg.synthdata import save_dataset

    out = tmp_path / "data"
    save_dataset(tiny_scenes(n, seed=seed), out)
    return out


def test_gen_data_is_reproducible(tmp_path, capsys):
    assert main(["gen-data", "--count", "6", "--seed", "5",
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--count", "6", "--seed", "5",
                 "--out", str(tmp_path / "b")]) == 0
    assert digest_dir(tmp_path / "a") == digest_dir(tmp_path / "b")
    assert (tmp_path / "a" / "images" / "0005.png").exists()


def test_train_eval_cycle(tmp_path, capsys):
    data = tiny_dataset_dir(tmp_path)
    cfg_file = micro_kv(tmp_path)
    run = tmp_path / "run"
    rc = main(["train", "--data", str(data), "--out", str(run),
               "--config", str(cfg_file), "--val-fraction", "0.34"])
    assert rc == 0
    assert (run / "checkpoint.ckpt").exists()
    assert (run / "epochs.csv").exists()
    assert (run / "config.kv").exists()
    assert (run / "val_report.txt").exists()
    out = capsys.readouterr().out
    assert "epoch   1" in out and "checkpoint:" in out

    rc = main(["eval", "--checkpoint", str(run / "checkpoint.ckpt"),
               "--data", str(data), "--out", str(tmp_path / "rep"), "--pr"])
    assert rc == 0
    assert (tmp_path / "rep" / "report.txt").exists()
    assert (tmp_path / "rep" / "report.kv").exists()
    assert (tmp_path / "rep" / "pr_curve.csv").exists()
    out = capsys.readouterr().out
    assert "oIoU" in out


def test_flags_override_config_file(tmp_path, capsys):
    data = tiny_dataset_dir(tmp_path)
    cfg_file = micro_kv(tmp_path)
    run = tmp_path / "run"
    rc = main(["train", "--data", str(data), "--out", str(run),
               "--config", str(cfg_file), "--val-fraction", "0",
               "--lambda-align", "0", "--align-stages", "",
               "--epochs", "2"])
    assert rc == 0
    written = (run / "config.kv").read_text()
    assert "lambda_align = 0.0" in written
    assert "align_stages = \n" in written or "align_stages =\n" in written.replace(" \n", "\n")
    assert "epochs = 2" in written
    # ablated alignment: the side-loss column logs exact zeros
    lines = (run / "epochs.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,L_task,L_align,L_total,train_mIoU"
    for line in lines[1:]:
        fields = line.split(",")
        assert float(fields[4]) == 0.0


def test_export_and_render_and_pr(tmp_path, capsys):
    data = tiny_dataset_dir(tmp_path)
    cfg_file = micro_kv(tmp_path)
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--config", str(cfg_file), "--val-fraction", "0"]) == 0
    ckpt = str(run / "checkpoint.ckpt")

    emb = tmp_path / "emb.tsv"
    assert main(["export-embeddings", "--checkpoint", ckpt,
                 "--data", str(data), "--out", str(emb)]) == 0
    lines = emb.read_text().splitlines()
    assert lines[0].split("\t")[:4] == ["sample_id", "stage", "pixel_index", "label"]
    # micro config: stages at 8x8, 4x4, 2x2, 1x1 -> 85 pixels + 4 CLS per sample
    assert len(lines) == 1 + 6 * (85 + 4)

    masks = tmp_path / "masks"
    assert main(["render-masks", "--checkpoint", ckpt, "--data", str(data),
                 "--out", str(masks)]) == 0
    files = sorted(masks.glob("*.png"))
    assert len(files) == 6
    img = Image.open(files[0])
    assert img.mode == "1" and img.size == (8, 8)

    pr = tmp_path / "pr.csv"
    assert main(["pr-curve", "--checkpoint", ckpt, "--data", str(data),
                 "--out", str(pr), "--num-thresholds", "11"]) == 0
    rows = pr.read_text().splitlines()
    assert rows[0] == "threshold,precision,recall"
    assert len(rows) == 12


def test_ablate_writes_tables(tmp_path, capsys):
    data = tiny_dataset_dir(tmp_path, n=8)
    cfg_file = micro_kv(tmp_path)
    out = tmp_path / "ablation"
    rc = main(["ablate", "--data", str(data), "--out", str(out),
               "--config", str(cfg_file), "--grid", "direction",
               "--seeds", "0", "--val-fraction", "0.25"])
    assert rc == 0
    table = (out / "ablation.txt").read_text()
    for cell in ("uni_no_align", "uni_align", "bi_no_align", "bi_align"):
        assert cell in table
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "cell,seed,val_miou,val_oiou,status"
    assert len(rows) == 5


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--data", "x", "--out", "y", "--no-such-flag"]) == 1
    assert main(["gen-data", "--count", "0", "--seed", "1",
                 "--out", str(tmp_path / "z")]) == 1  # library usage error
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"),
                 "--data", str(tmp_path)]) == 2  # runtime failure
    err = capsys.readouterr().err
    assert "usage error" in err


def test_determinism_of_trained_runs(tmp_path):
    data = tiny_dataset_dir(tmp_path)
    cfg_file = micro_kv(tmp_path)
    for name in ("r1", "r2"):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / name),
                     "--config", str(cfg_file), "--val-fraction", "0"]) == 0
    a = (tmp_path / "r1" / "epochs.csv").read_bytes()
    b = (tmp_path / "r2" / "epochs.csv").read_bytes()
    assert a == b
    ca = (tmp_path / "r1" / "checkpoint.ckpt").read_bytes()
    cb = (tmp_path / "r2" / "checkpoint.ckpt").read_bytes()
    assert ca == cb
