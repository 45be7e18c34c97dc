"""Parameter manifest construction and deterministic initialization.

Every learnable array (and every piece of persistent normalization state)
lives in a flat map from a hierarchical path such as
`vision.stage2.fusion.attn1.q_proj.weight` to a float64 `Tensor`.  The
manifest enumerates exactly which paths exist for a given `ModelConfig` —
fusion and alignment parameters only exist for the stages that enable them,
so checkpoints and optimizers can be verified structurally.

Initialization is deterministic in (config, seed) and independent of
construction order: each path derives its own RNG stream from the seed and a
hash of the path.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .config import ModelConfig, require_valid
from .errors import ConfigError

TRUNC_NORMAL_STD = 0.02
INITIAL_TEMPERATURE = 0.07

KIND_WEIGHT = "weight"
KIND_BIAS = "bias"
KIND_GAIN = "gain"
KIND_EMBEDDING = "embedding"
KIND_LOG_TAU = "log_tau"

_DECAYED_KINDS = (KIND_WEIGHT, KIND_EMBEDDING)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    shape: tuple[int, ...]
    kind: str

    @property
    def decayed(self) -> bool:
        return self.kind in _DECAYED_KINDS

    @property
    def count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class Params:
    """Flat path -> Tensor map plus its manifest."""

    def __init__(self, tensors: dict[str, Tensor], manifest: list[ManifestEntry]):
        self.tensors = tensors
        self.manifest = manifest
        self._by_path = {e.path: e for e in manifest}

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def entry(self, path: str) -> ManifestEntry:
        return self._by_path[path]

    def paths(self) -> list[str]:
        return [e.path for e in self.manifest]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def total_count(self) -> int:
        return sum(e.count for e in self.manifest)


def _attention_entries(prefix: str, model_dim: int, kv_dim: int) -> list[ManifestEntry]:
    e = [ManifestEntry(f"{prefix}.q_proj.weight", (model_dim, model_dim), KIND_WEIGHT),
         ManifestEntry(f"{prefix}.q_proj.bias", (model_dim,), KIND_BIAS)]
    for name in ("k_proj", "v_proj"):
        e.append(ManifestEntry(f"{prefix}.{name}.weight", (kv_dim, model_dim), KIND_WEIGHT))
        e.append(ManifestEntry(f"{prefix}.{name}.bias", (model_dim,), KIND_BIAS))
    e.append(ManifestEntry(f"{prefix}.out_proj.weight", (model_dim, model_dim), KIND_WEIGHT))
    e.append(ManifestEntry(f"{prefix}.out_proj.bias", (model_dim,), KIND_BIAS))
    return e


def _ffn_entries(prefix: str, dim: int, hidden: int | None = None) -> list[ManifestEntry]:
    hidden = 4 * dim if hidden is None else hidden
    return [ManifestEntry(f"{prefix}.fc1.weight", (dim, hidden), KIND_WEIGHT),
            ManifestEntry(f"{prefix}.fc1.bias", (hidden,), KIND_BIAS),
            ManifestEntry(f"{prefix}.fc2.weight", (hidden, dim), KIND_WEIGHT),
            ManifestEntry(f"{prefix}.fc2.bias", (dim,), KIND_BIAS)]


def _norm_entries(prefix: str, dim: int) -> list[ManifestEntry]:
    return [ManifestEntry(f"{prefix}.gain", (dim,), KIND_GAIN),
            ManifestEntry(f"{prefix}.bias", (dim,), KIND_BIAS)]


def _self_block_entries(prefix: str, dim: int) -> list[ManifestEntry]:
    """Post-norm transformer block: attention, norm, feed-forward, norm."""
    return (_attention_entries(f"{prefix}.attn", dim, dim)
            + _norm_entries(f"{prefix}.ln1", dim)
            + _ffn_entries(f"{prefix}.ffn", dim)
            + _norm_entries(f"{prefix}.ln2", dim))


def _batchnorm_entries(prefix: str, dim: int) -> list[ManifestEntry]:
    return [ManifestEntry(f"{prefix}.gain", (dim,), KIND_GAIN),
            ManifestEntry(f"{prefix}.bias", (dim,), KIND_BIAS)]


def build_manifest(cfg: ModelConfig) -> list[ManifestEntry]:
    """Enumerate every parameter path the config implies, in canonical order."""
    require_valid(cfg)
    n = cfg.num_stages
    ch = cfg.vision_channels
    d = cfg.lang_dim
    entries: list[ManifestEntry] = []

    # vision backbone
    h1 = cfg.stage_resolution(1)
    entries += [
        ManifestEntry("patch_embed.weight", (3 * cfg.patch_size ** 2, ch[0]), KIND_WEIGHT),
        ManifestEntry("patch_embed.bias", (ch[0],), KIND_BIAS),
        ManifestEntry("patch_embed.pos", (h1 * h1, ch[0]), KIND_EMBEDDING),
    ]
    for i in range(1, n + 1):
        c = ch[i - 1]
        sp = f"vision.stage{i}"
        for k in range(1, cfg.vision_depths[i - 1] + 1):
            entries += _self_block_entries(f"{sp}.block{k}", c)
        fused = i in cfg.fusion_stages
        if fused:
            entries += _attention_entries(f"{sp}.fusion.attn1", c, d)
            entries += _ffn_entries(f"{sp}.fusion.ffn1", c)
        if i < n:
            c_next = ch[i]
            entries += [ManifestEntry(f"{sp}.down.weight", (4 * c, c_next), KIND_WEIGHT),
                        ManifestEntry(f"{sp}.down.bias", (c_next,), KIND_BIAS)]
            if fused:
                entries += _attention_entries(f"{sp}.fusion.attn2", c_next, d)
                entries += _ffn_entries(f"{sp}.fusion.ffn2", c_next)

    # language encoder
    entries += [
        ManifestEntry("lang.embed.table", (cfg.vocab_size, d), KIND_EMBEDDING),
        ManifestEntry("lang.embed.pos", (cfg.max_tokens, d), KIND_EMBEDDING),
    ]
    for i in range(1, n + 1):
        sp = f"lang.stage{i}"
        self_layers = cfg.lang_depths[i - 1]
        if i >= 2:
            self_layers -= 1  # first layer slot is reserved for cross-attention
            if language_fusion_active(cfg, i):
                entries += _attention_entries(f"{sp}.fusion.attn", d, ch[i - 1])
                entries += _ffn_entries(f"{sp}.fusion.ffn", d)
        for k in range(1, self_layers + 1):
            entries += _self_block_entries(f"{sp}.layer{k}", d)

    # per-stage alignment heads
    for i in cfg.align_stages:
        sp = f"align.stage{i}"
        entries += [
            ManifestEntry(f"{sp}.v_proj.weight", (ch[i - 1], cfg.align_dim), KIND_WEIGHT),
            ManifestEntry(f"{sp}.v_proj.bias", (cfg.align_dim,), KIND_BIAS),
            ManifestEntry(f"{sp}.l_proj.weight", (d, cfg.align_dim), KIND_WEIGHT),
            ManifestEntry(f"{sp}.l_proj.bias", (cfg.align_dim,), KIND_BIAS),
            ManifestEntry(f"{sp}.log_tau", (), KIND_LOG_TAU),
        ]

    # side heads for the auxiliary-loss comparator
    if cfg.loss_mode == "auxiliary":
        for i in cfg.align_stages:
            entries += [
                ManifestEntry(f"aux.stage{i}.weight", (ch[i - 1], 1), KIND_WEIGHT),
                ManifestEntry(f"aux.stage{i}.bias", (1,), KIND_BIAS),
            ]

    # segmentation decoder: three blocks walking back up the pyramid
    dec = cfg.decoder_channels
    skip = [ch[2], ch[1], ch[0]]  # concatenated per-stage features, top-down
    in_ch = ch[3]
    for b in range(1, 4):
        sp = f"decoder.block{b}"
        cin = in_ch + skip[b - 1]
        cout = dec[b - 1]
        entries += [ManifestEntry(f"{sp}.conv1.weight", (9 * cin, cout), KIND_WEIGHT),
                    ManifestEntry(f"{sp}.conv1.bias", (cout,), KIND_BIAS)]
        entries += _batchnorm_entries(f"{sp}.bn1", cout)
        entries += [ManifestEntry(f"{sp}.conv2.weight", (9 * cout, cout), KIND_WEIGHT),
                    ManifestEntry(f"{sp}.conv2.bias", (cout,), KIND_BIAS)]
        entries += _batchnorm_entries(f"{sp}.bn2", cout)
        in_ch = cout
    entries += [ManifestEntry("decoder.head.weight", (dec[2], 1), KIND_WEIGHT),
                ManifestEntry("decoder.head.bias", (1,), KIND_BIAS)]

    paths = [e.path for e in entries]
    if len(paths) != len(set(paths)):
        dupes = sorted({p for p in paths if paths.count(p) > 1})
        raise ConfigError(f"duplicate parameter paths in manifest: {dupes}")
    return entries


def language_fusion_active(cfg: ModelConfig, stage: int) -> bool:
    """The language cross-attention of stage i belongs to fusion block i-1."""
    return (stage >= 2
            and cfg.fusion_direction == "bidirectional"
            and (stage - 1) in cfg.fusion_stages)


def _path_rng(seed: int, path: str) -> np.random.Generator:
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    words = [int.from_bytes(digest[k:k + 4], "little") for k in range(0, 16, 4)]
    return np.random.default_rng([seed, *words])


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with redrawn tails beyond two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def init_entry(entry: ManifestEntry, seed: int) -> np.ndarray:
    if entry.kind in (KIND_WEIGHT, KIND_EMBEDDING):
        return truncated_normal(_path_rng(seed, entry.path), entry.shape, TRUNC_NORMAL_STD)
    if entry.kind == KIND_BIAS:
        return np.zeros(entry.shape)
    if entry.kind == KIND_GAIN:
        return np.ones(entry.shape)
    if entry.kind == KIND_LOG_TAU:
        return np.asarray(math.log(INITIAL_TEMPERATURE))
    raise ValueError(f"unknown manifest kind {entry.kind!r}")


def init_params(cfg: ModelConfig, seed: int | None = None) -> Params:
    """Create all parameters for `cfg`, deterministically in (cfg, seed).

    Weights and embedding tables are truncated-normal (std 0.02), biases are
    zero, normalization gains are one, and each per-stage temperature starts
    at 0.07 (stored as its logarithm so it stays positive under training).
    """
    seed = cfg.seed if seed is None else seed
    manifest = build_manifest(cfg)
    tensors = {
        e.path: Tensor(init_entry(e, seed), requires_grad=True)
        for e in manifest
    }
    return Params(tensors, manifest)
