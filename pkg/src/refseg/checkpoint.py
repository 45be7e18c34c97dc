"""Versioned binary checkpoints.

Layout: an 8-byte magic and a u32 format version, then three length-prefixed
UTF-8 blobs (model config as key=value text, training config as key=value
text, RNG/progress state as JSON), a u64 step counter, and a u64 record
count followed by the records.  Each record is `path | dtype | shape | raw
little-endian bytes`.  Records cover every manifest entry plus the optimizer
moments (`opt.m.*` / `opt.v.*`).

Loading rebuilds the manifest from the embedded config and refuses the file
(listing every difference by path) if the records disagree — so a checkpoint
from an ablated architecture cannot be silently loaded into a different one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, config_from_kv, config_to_kv
from .errors import CheckpointError
from .params import Params, build_manifest
from .train import AdamW, TrainConfig, TrainResult
from .autodiff import Tensor

MAGIC = b"REFSEG\x00\x01"
VERSION = 1


@dataclass
class Checkpoint:
    cfg: ModelConfig
    train_cfg: TrainConfig
    params: Params
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    rng_state: dict

    def optimizer(self) -> AdamW:
        opt = AdamW(self.params, self.train_cfg.weight_decay)
        opt.step_count = self.step
        opt.m = {k: v.copy() for k, v in self.opt_m.items()}
        opt.v = {k: v.copy() for k, v in self.opt_v.items()}
        return opt


def _write_blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<Q", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_blob(fh) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(fh, 8))
    return _read_exact(fh, n)


def _write_record(fh, path: str, arr: np.ndarray) -> None:
    name = path.encode("utf-8")
    fh.write(struct.pack("<H", len(name)))
    fh.write(name)
    dtype = arr.dtype.newbyteorder("<").str.encode("ascii")
    fh.write(struct.pack("<B", len(dtype)))
    fh.write(dtype)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    path = _read_exact(fh, name_len).decode("utf-8")
    (dtype_len,) = struct.unpack("<B", _read_exact(fh, 1))
    dtype = np.dtype(_read_exact(fh, dtype_len).decode("ascii"))
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return path, arr.reshape(shape).astype(np.float64)


def save_checkpoint(path, result_or_parts, train_cfg: TrainConfig | None = None) -> None:
    """Save a `TrainResult` (or an explicit tuple) to `path`."""
    if isinstance(result_or_parts, TrainResult):
        res = result_or_parts
        cfg, tc, params = res.cfg, res.train_cfg, res.params
        opt_m, opt_v = res.optimizer.m, res.optimizer.v
        step, rng_state = res.optimizer.step_count, res.rng_state
    else:
        cfg, params, opt_m, opt_v, step, rng_state = result_or_parts
        tc = train_cfg if train_cfg is not None else TrainConfig()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_blob(fh, config_to_kv(cfg).encode("utf-8"))
        _write_blob(fh, config_to_kv(tc).encode("utf-8"))
        _write_blob(fh, json.dumps(rng_state, sort_keys=True).encode("utf-8"))
        fh.write(struct.pack("<Q", step))
        records = [(e.path, params[e.path].data) for e in params.manifest]
        records += [(f"opt.m.{k}", v) for k, v in sorted(opt_m.items())]
        records += [(f"opt.v.{k}", v) for k, v in sorted(opt_v.items())]
        fh.write(struct.pack("<Q", len(records)))
        for name, arr in records:
            _write_record(fh, name, np.asarray(arr))


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    """Load and structurally verify a checkpoint.

    When `expect_config` is given, the embedded config must match it exactly;
    either way the record set must match the manifest the config implies, and
    any difference is refused with a per-path diff.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        cfg = config_from_kv(_read_blob(fh).decode("utf-8"), ModelConfig)
        train_cfg = config_from_kv(_read_blob(fh).decode("utf-8"), TrainConfig)
        rng_state = json.loads(_read_blob(fh).decode("utf-8"))
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (n_records,) = struct.unpack("<Q", _read_exact(fh, 8))
        records = dict(_read_record(fh) for _ in range(n_records))

    if expect_config is not None and expect_config != cfg:
        want = config_to_kv(expect_config).splitlines()
        got = config_to_kv(cfg).splitlines()
        diff = [f"  expected {w!r}, checkpoint has {g!r}"
                for w, g in zip(want, got) if w != g]
        raise CheckpointError(
            f"{path}: checkpoint config does not match the requested model:\n"
            + "\n".join(diff))

    manifest = build_manifest(cfg)
    problems = []
    tensors = {}
    for entry in manifest:
        if entry.path not in records:
            problems.append(f"  missing parameter {entry.path}")
            continue
        arr = records.pop(entry.path)
        if arr.shape != entry.shape:
            problems.append(f"  shape mismatch at {entry.path}: "
                            f"manifest {entry.shape}, record {arr.shape}")
            continue
        tensors[entry.path] = Tensor(arr.copy(), requires_grad=True)
    opt_m, opt_v = {}, {}
    param_paths = {e.path for e in manifest}
    for name in list(records):
        for prefix, store in (("opt.m.", opt_m), ("opt.v.", opt_v)):
            if name.startswith(prefix):
                key = name[len(prefix):]
                if key in param_paths:
                    store[key] = records.pop(name)
                else:
                    problems.append(f"  orphan optimizer record {name}")
                    records.pop(name)
                break
        else:
            problems.append(f"  unexpected record {name}")
    missing_m = param_paths - set(opt_m)
    if missing_m:
        problems.extend(f"  missing optimizer moment for {k}" for k in sorted(missing_m))
    if problems:
        raise CheckpointError(f"{path}: refusing checkpoint:\n" + "\n".join(problems))
    return Checkpoint(cfg=cfg, train_cfg=train_cfg, params=Params(tensors, manifest),
                      opt_m=opt_m, opt_v=opt_v, step=step, rng_state=rng_state)
