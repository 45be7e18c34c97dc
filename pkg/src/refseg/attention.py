"""Multi-head cross/self attention and the feed-forward block.

These are the two computational primitives shared by both encoders and all
fusion layers: scaled dot-product attention over full sequences (queries and
keys/values may come from different modalities and widths) and a two-layer
feed-forward with a Gaussian-error nonlinearity.

Neither primitive applies residuals or normalization; callers compose those
so the fusion layers can follow their residual wiring literally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateMaskError, NumericError, ShapeError
from .params import Params

MASK_FILL = -1e30  # drives masked keys to exactly zero weight after softmax


@dataclass(frozen=True)
class AttentionSpec:
    """Shapes of one attention site: queries at `model_dim`, keys/values
    projected from `kv_dim` into `model_dim`, split across `num_heads`."""

    model_dim: int
    num_heads: int
    kv_dim: int | None = None

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def key_value_dim(self) -> int:
        return self.model_dim if self.kv_dim is None else self.kv_dim


@dataclass(frozen=True)
class FFNSpec:
    model_dim: int

    @property
    def hidden_dim(self) -> int:
        return 4 * self.model_dim


def _check_finite(name: str, x: Tensor) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{name} contains non-finite values")


def _affine(p: Params, prefix: str, x: Tensor) -> Tensor:
    return ad.linear(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def mhca(spec: AttentionSpec, p: Params, prefix: str, query: Tensor, kv: Tensor,
         key_padding: np.ndarray | None = None,
         attn_sink: list | None = None) -> Tensor:
    """Multi-head attention of `query` (N_q, model_dim) over `kv` (N_k, kv_dim).

    `key_padding` is a boolean vector over key positions; True marks keys
    (padding tokens) that must receive exactly zero attention weight.  When
    `attn_sink` is given, the post-softmax weights (num_heads, N_q, N_k) are
    appended to it for inspection.
    """
    _check_finite("attention query", query)
    _check_finite("attention key/value", kv)
    nq, dm = query.shape
    nk, dkv = kv.shape
    if dm != spec.model_dim or dkv != spec.key_value_dim:
        raise ShapeError(
            f"{prefix}: got query dim {dm} / kv dim {dkv}, "
            f"spec wants {spec.model_dim} / {spec.key_value_dim}")
    heads, dk = spec.num_heads, spec.head_dim

    q = _affine(p, f"{prefix}.q_proj", query)
    k = _affine(p, f"{prefix}.k_proj", kv)
    v = _affine(p, f"{prefix}.v_proj", kv)

    qh = ad.transpose(ad.reshape(q, (nq, heads, dk)), (1, 0, 2))   # (H, Nq, dk)
    kt = ad.transpose(ad.reshape(k, (nk, heads, dk)), (1, 2, 0))   # (H, dk, Nk)
    vh = ad.transpose(ad.reshape(v, (nk, heads, dk)), (1, 0, 2))   # (H, Nk, dk)

    scores = ad.mul(ad.matmul(qh, kt), 1.0 / np.sqrt(dk))          # (H, Nq, Nk)
    if key_padding is not None:
        key_padding = np.asarray(key_padding, dtype=bool)
        if key_padding.shape != (nk,):
            raise ShapeError(f"{prefix}: key_padding must have length {nk}")
        if key_padding.all():
            raise DegenerateMaskError(f"{prefix}: every key position is masked")
        fill = np.where(key_padding, MASK_FILL, 0.0).reshape(1, 1, nk)
        scores = ad.add(scores, fill)

    weights = ad.softmax_lastaxis(scores)
    if attn_sink is not None:
        attn_sink.append(weights.data.copy())

    out = ad.matmul(weights, vh)                                   # (H, Nq, dk)
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (nq, dm))
    return _affine(p, f"{prefix}.out_proj", out)


def ffn(spec: FFNSpec, p: Params, prefix: str, x: Tensor) -> Tensor:
    """Rowwise feed-forward: affine -> GELU -> affine."""
    _check_finite("feed-forward input", x)
    if x.shape[-1] != spec.model_dim:
        raise ShapeError(f"{prefix}: input dim {x.shape[-1]} != {spec.model_dim}")
    return _affine(p, f"{prefix}.fc2", ad.gelu(_affine(p, f"{prefix}.fc1", x)))


def layer_norm(p: Params, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def self_attention_block(p: Params, prefix: str, num_heads: int, x: Tensor,
                         key_padding: np.ndarray | None = None,
                         attn_sink: list | None = None) -> Tensor:
    """Standard post-norm encoder block: LN(x + attn(x)), then LN(y + ffn(y))."""
    dim = x.shape[-1]
    spec = AttentionSpec(dim, num_heads)
    attended = mhca(spec, p, f"{prefix}.attn", x, x,
                    key_padding=key_padding, attn_sink=attn_sink)
    y = layer_norm(p, f"{prefix}.ln1", ad.add(x, attended))
    return layer_norm(p, f"{prefix}.ln2", ad.add(y, ffn(FFNSpec(dim), p, f"{prefix}.ffn", y)))
