"""Shared fixtures and the finite-difference gradient checker."""

from __future__ import annotations

import numpy as np
import pytest

from refseg.config import ModelConfig
from refseg.params import Params, init_params
from refseg.synthdata import COLOR_NAMES, COLORS, Scene, SceneObject, rasterize

FD_STEP = 1e-3


def tiny_scenes(n: int, size: int = 8, seed: int = 0) -> list[Scene]:
    """Hand-built scenes small enough for the micro config (the full
    generator's object sizes do not fit an 8px canvas)."""
    rng = np.random.default_rng(seed)
    shapes = ("circle", "square")
    scenes = []
    for _ in range(n):
        color = str(rng.choice(COLOR_NAMES))
        other = str(rng.choice([c for c in COLOR_NAMES if c != color]))
        shape = str(rng.choice(shapes))
        cx, cy = int(rng.integers(2, size - 2)), int(rng.integers(2, size - 2))
        target = SceneObject(shape, color, "small", cx, cy, 2)
        distractor = SceneObject(shape, other, "small",
                                 (cx + size // 2) % size, cy, 1)
        mask = rasterize(target, size)
        image = np.full((3, size, size), 0.08)
        for obj in (distractor, target):
            m = rasterize(obj, size)
            for ch, value in enumerate(COLORS[obj.color]):
                image[ch][m] = value
        scenes.append(Scene(image, [target, distractor], 0,
                            f"{color} {shape}", mask))
    return scenes


def micro_config(**overrides) -> ModelConfig:
    """Smallest valid pipeline: 8px image, 1px patches, single heads."""
    base = dict(
        image_size=8, patch_size=1,
        vision_depths=(1, 1, 1, 1), vision_channels=(4, 6, 8, 10),
        vision_heads=(1, 1, 1, 1), lang_depths=(1, 1, 1, 1),
        lang_dim=8, lang_heads=1, vocab_size=16, max_tokens=4,
        align_dim=4, decoder_channels=(8, 6, 4), seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def micro_cfg() -> ModelConfig:
    return micro_config()


@pytest.fixture
def default_cfg() -> ModelConfig:
    return ModelConfig()


def rel_err(a: float, b: float) -> float:
    """Normalized difference: |a-b| / max(1, |a|, |b|)."""
    return abs(a - b) / max(1.0, abs(a), abs(b))


def numeric_grad(make_loss, arr: np.ndarray, flat_index: int,
                 h: float = FD_STEP) -> float:
    """Central finite difference of `make_loss()` w.r.t. one array entry."""
    flat = arr.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + h
    up = make_loss().item()
    flat[flat_index] = old - h
    down = make_loss().item()
    flat[flat_index] = old
    return (up - down) / (2.0 * h)


def check_grads(make_loss, params: Params, paths: list[str], rng: np.random.Generator,
                coords_per_param: int = 2, tol: float = 1e-5,
                h: float = FD_STEP) -> float:
    """Compare analytic gradients against central differences.

    Runs one forward+backward for the analytic gradients, then two forwards
    per sampled coordinate.  Returns the worst normalized error seen and
    asserts it is within `tol`.
    """
    params.zero_grads()
    make_loss().backward()
    analytic = {path: (None if params[path].grad is None
                       else params[path].grad.copy()) for path in paths}
    worst = 0.0
    for path in paths:
        t = params[path]
        size = t.data.size
        n = min(coords_per_param, size)
        picks = rng.choice(size, size=n, replace=False) if size > 1 else [0]
        for flat_index in picks:
            num = numeric_grad(make_loss, t.data, int(flat_index), h=h)
            ana = 0.0 if analytic[path] is None else float(
                analytic[path].reshape(-1)[int(flat_index)])
            err = rel_err(ana, num)
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch at {path}[{flat_index}]: "
                f"analytic {ana!r}, numeric {num!r}, err {err:.3e}")
    return worst


def sample_paths(params: Params, rng: np.random.Generator, per_module: int = 50,
                 prefixes: tuple[str, ...] = ()) -> list[str]:
    """Sample trainable parameter paths, optionally restricted by prefix."""
    pool = [p for p in params.paths()
            if not prefixes or any(p.startswith(px) for px in prefixes)]
    if len(pool) <= per_module:
        return pool
    picks = rng.choice(len(pool), size=per_module, replace=False)
    return [pool[i] for i in picks]
