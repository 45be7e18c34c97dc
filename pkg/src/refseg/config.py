"""Model configuration, validation, and the flat key=value text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError

FUSION_DIRECTIONS = ("bidirectional", "vision_only")
LOSS_MODES = ("alignment", "auxiliary")
ALIGN_NORMS = ("per_stage_mean", "global_pixel_mean")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are desk-scale: a 64px image through four vision stages of
    channel widths 32..256, a 4-stage language encoder at width 64, and a
    32-dim shared space for the per-stage text-to-pixel alignment.  The
    published-scale language split (6,2,2,2 layers, 21 tokens) is reachable
    through `lang_depths` / `max_tokens`.

    `lambda_align` weights the alignment term in the total loss; 0.1 is this
    repository's own default, not a value taken from anywhere else.
    """

    image_size: int = 64
    patch_size: int = 4
    num_stages: int = 4
    vision_depths: tuple[int, ...] = (1, 1, 1, 1)
    vision_channels: tuple[int, ...] = (32, 64, 128, 256)
    vision_heads: tuple[int, ...] = (2, 4, 8, 8)
    lang_depths: tuple[int, ...] = (3, 1, 1, 1)
    lang_dim: int = 64
    lang_heads: int = 4
    vocab_size: int = 16
    max_tokens: int = 12
    align_dim: int = 32
    lambda_align: float = 0.1
    fusion_stages: tuple[int, ...] = (1, 2, 3, 4)
    align_stages: tuple[int, ...] = (1, 2, 3, 4)
    fusion_direction: str = "bidirectional"
    loss_mode: str = "alignment"
    align_norm: str = "per_stage_mean"
    decoder_channels: tuple[int, ...] = (128, 64, 32)
    seed: int = 0

    def stage_resolution(self, i: int) -> int:
        """Side length of the stage-i feature map (stages are 1-indexed)."""
        return self.image_size // (self.patch_size * 2 ** (i - 1))

    def stage_tokens(self, i: int) -> int:
        return self.stage_resolution(i) ** 2

    @property
    def stages(self) -> range:
        return range(1, self.num_stages + 1)


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return a list of violated invariants (empty when the config is valid)."""
    v: list[str] = []
    n = cfg.num_stages
    if n != 4:
        v.append(f"num_stages: must be 4, got {n}")
        return v  # later checks assume the 4-stage chain

    chain = cfg.patch_size * 2 ** (n - 1)
    if cfg.image_size <= 0 or cfg.patch_size <= 0 or cfg.image_size % chain != 0:
        v.append(
            "image_size/patch_size: resolution chain not integral "
            f"({cfg.image_size}px over patch {cfg.patch_size} does not divide "
            f"by {chain})"
        )

    for name, seq in (("vision_depths", cfg.vision_depths),
                      ("vision_channels", cfg.vision_channels),
                      ("vision_heads", cfg.vision_heads)):
        if len(seq) != n:
            v.append(f"{name}: length must equal num_stages ({n}), got {len(seq)}")
        elif any(x < 1 for x in seq):
            v.append(f"{name}: entries must be >= 1")

    if len(cfg.vision_channels) == n and len(cfg.vision_heads) == n:
        for i in range(n):
            c, h = cfg.vision_channels[i], cfg.vision_heads[i]
            if c % h != 0:
                v.append(f"vision stage {i + 1}: channels {c} not divisible by heads {h}")
        # the second fusion attention of stage i runs at the stage-(i+1) width
        for i in cfg.fusion_stages:
            if 1 <= i < n and cfg.vision_channels[i] % cfg.vision_heads[i - 1] != 0:
                v.append(
                    f"fusion stage {i}: downsampled width {cfg.vision_channels[i]} "
                    f"not divisible by stage heads {cfg.vision_heads[i - 1]}"
                )

    if len(cfg.lang_depths) != n:
        v.append(f"lang_depths: length must equal num_stages ({n}), got {len(cfg.lang_depths)}")
    elif any(d < 1 for d in cfg.lang_depths):
        v.append("lang_depths: every stage needs >= 1 layer "
                 "(stages 2..n spend their first layer on cross-attention)")

    if cfg.lang_dim < 1 or cfg.lang_heads < 1 or cfg.lang_dim % cfg.lang_heads != 0:
        v.append(f"lang_dim {cfg.lang_dim} not divisible by lang_heads {cfg.lang_heads}")
    if cfg.max_tokens < 2:
        v.append(f"max_tokens: need >= 2 (one [CLS] plus one word), got {cfg.max_tokens}")
    if cfg.vocab_size < 2:
        v.append(f"vocab_size: need >= 2, got {cfg.vocab_size}")
    if cfg.align_dim < 1:
        v.append(f"align_dim: need >= 1, got {cfg.align_dim}")
    if cfg.lambda_align < 0:
        v.append(f"lambda_align: must be >= 0, got {cfg.lambda_align}")

    for name, stages in (("fusion_stages", cfg.fusion_stages),
                         ("align_stages", cfg.align_stages)):
        if sorted(set(stages)) != sorted(stages):
            v.append(f"{name}: duplicate entries {stages}")
        if any(s < 1 or s > n for s in stages):
            v.append(f"{name}: entries must lie in 1..{n}, got {stages}")

    if cfg.fusion_direction not in FUSION_DIRECTIONS:
        v.append(f"fusion_direction: {cfg.fusion_direction!r} not in {FUSION_DIRECTIONS}")
    if cfg.loss_mode not in LOSS_MODES:
        v.append(f"loss_mode: {cfg.loss_mode!r} not in {LOSS_MODES}")
    if cfg.align_norm not in ALIGN_NORMS:
        v.append(f"align_norm: {cfg.align_norm!r} not in {ALIGN_NORMS}")
    if len(cfg.decoder_channels) != 3 or any(c < 1 for c in cfg.decoder_channels):
        v.append(f"decoder_channels: need 3 positive widths, got {cfg.decoder_channels}")
    if cfg.seed < 0:
        v.append(f"seed: must be >= 0, got {cfg.seed}")
    return v


def require_valid(cfg: ModelConfig) -> None:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("; ".join(violations))


# flat key=value serialization ----------------------------------------------
#
# One `key = value` line per field; integer lists are comma-separated and an
# empty list serializes to an empty value.  The same format is embedded in
# checkpoints and accepted by the CLI's --config flag.

def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(x) for x in value)
    return str(value)


def _parse_value(text: str, ftype):
    text = text.strip()
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is str:
        return text
    # remaining fields are tuples of ints
    if text == "":
        return ()
    return tuple(int(x) for x in text.split(","))


def config_to_kv(cfg) -> str:
    """Serialize any flat dataclass of int/float/str/int-tuple fields."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def kv_to_dict(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _field_base_type(f: dataclasses.Field):
    """Map a field annotation (possibly a string, possibly optional) to a parser type."""
    ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    ann = ann.replace(" ", "")
    for cand, base in (("int", int), ("float", float), ("str", str)):
        if ann == cand or ann == f"{cand}|None" or ann == f"Optional[{cand}]":
            return base
    return tuple  # int-tuple fields (plain or optional)


def config_from_kv(text: str, cls=ModelConfig, *, strict: bool = True):
    """Rebuild a config dataclass from key=value text.

    Unknown keys raise unless `strict=False` (used when one file carries both
    the model and the training config).
    """
    raw = kv_to_dict(text)
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in known:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        try:
            kwargs[key] = _parse_value(value, _field_base_type(known[key]))
        except ValueError as e:
            raise ConfigError(f"config key {key!r}: {e}") from None
    return cls(**kwargs)
