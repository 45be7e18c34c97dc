"""Stage-divided language encoder.

Token ids are embedded (table lookup plus learned positions) and flow through
four stages whose depths come from `lang_depths`.  Stage 1 is a plain
self-attention stack.  In stages 2..4 the first layer slot is a language-query
fusion layer: the language sequence attends onto the vision features produced
by the previous stage's fusion, adds the residual, and a feed-forward follows
with its residual taken from the attention sum.  The remaining slots are
ordinary self-attention layers.

Padding is handled purely through key masks: [PAD] rows are still computed,
but they are never attended to, so they cannot influence any other token.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import AttentionSpec, FFNSpec, ffn, mhca, self_attention_block
from .autodiff import Tensor
from .config import ModelConfig
from .errors import DataError, ShapeError, UsageError
from .params import Params, language_fusion_active


def embed_tokens(cfg: ModelConfig, p: Params, ids: np.ndarray) -> Tensor:
    """Look up token embeddings and add positional embeddings; (T,) -> (T, D)."""
    ids = np.asarray(ids)
    if ids.shape != (cfg.max_tokens,):
        raise ShapeError(f"expected {cfg.max_tokens} token ids, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)]
        raise DataError(f"token ids out of vocabulary (size {cfg.vocab_size}): {bad.tolist()}")
    d = cfg.lang_dim
    flat = (ids[:, None] * d + np.arange(d)[None, :])
    rows = ad.take_flat(p["lang.embed.table"], flat, (cfg.max_tokens, d))
    return ad.add(rows, p["lang.embed.pos"])


def language_stage_forward(cfg: ModelConfig, p: Params, stage: int, l_prev: Tensor,
                           f_v_prev: Tensor | None, padding: np.ndarray,
                           attn_sink: list | None = None) -> Tensor:
    """Run language stage `stage` on (T, D) features; returns L_i of shape (T, D).

    For stages >= 2 with bidirectional fusion enabled, `f_v_prev` must be the
    downsampled vision output of the previous stage.  In vision-only mode (or
    when the previous stage's fusion is ablated) the cross-attention slot is
    bypassed and the stage reduces to its remaining self-attention layers.
    """
    i = stage
    d = cfg.lang_dim
    if l_prev.shape != (cfg.max_tokens, d):
        raise ShapeError(f"language stage {i}: expected ({cfg.max_tokens}, {d}), "
                         f"got {l_prev.shape}")
    x = l_prev
    self_layers = cfg.lang_depths[i - 1]
    if i >= 2:
        self_layers -= 1
        if language_fusion_active(cfg, i):
            if f_v_prev is None:
                raise UsageError(f"language stage {i}: fusion enabled but no vision "
                                 "features were given")
            kv_dim = cfg.vision_channels[i - 1]
            sp = f"lang.stage{i}.fusion"
            f_hat = ad.add(mhca(AttentionSpec(d, cfg.lang_heads, kv_dim), p, f"{sp}.attn",
                                x, f_v_prev, attn_sink=attn_sink), x)
            x = ad.add(ffn(FFNSpec(d), p, f"{sp}.ffn", f_hat), f_hat)
    for k in range(1, self_layers + 1):
        x = self_attention_block(p, f"lang.stage{i}.layer{k}", cfg.lang_heads, x,
                                 key_padding=padding, attn_sink=attn_sink)
    return x


def cls_row(l_i: Tensor) -> Tensor:
    """The sentence-level summary token: row 0 of the stage output, as a view."""
    return l_i[0:1, :]
