"""Naive attention oracle: explicit loops, one query at a time.

Written independently of refseg.attention (plain numpy, no Tensor machinery)
so the two implementations can check each other.
"""

from __future__ import annotations

import math

import numpy as np


def naive_mhca(weights: dict, query: np.ndarray, kv: np.ndarray, num_heads: int,
               key_padding=None) -> np.ndarray:
    """weights maps q/k/v/out to (weight, bias) pairs."""
    wq, bq = weights["q"]
    wk, bk = weights["k"]
    wv, bv = weights["v"]
    wo, bo = weights["out"]
    nq = query.shape[0]
    nk = kv.shape[0]
    model_dim = wq.shape[1]
    dk = model_dim // num_heads

    q = query @ wq + bq
    k = kv @ wk + bk
    v = kv @ wv + bv

    out = np.zeros((nq, model_dim))
    for h in range(num_heads):
        sl = slice(h * dk, (h + 1) * dk)
        for iq in range(nq):
            scores = []
            for ik in range(nk):
                if key_padding is not None and key_padding[ik]:
                    scores.append(-math.inf)
                else:
                    scores.append(float(q[iq, sl] @ k[ik, sl]) / math.sqrt(dk))
            top = max(scores)
            exps = [0.0 if s == -math.inf else math.exp(s - top) for s in scores]
            denom = sum(exps)
            for ik in range(nk):
                out[iq, sl] += (exps[ik] / denom) * v[ik, sl]
    return out @ wo + bo


def weights_from_params(p, prefix: str) -> dict:
    return {name: (p[f"{prefix}.{name}_proj.weight"].data.copy(),
                   p[f"{prefix}.{name}_proj.bias"].data.copy())
            for name in ("q", "k", "v", "out")}
