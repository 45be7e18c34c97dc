"""Deterministic synthetic referring-expression scenes.

Each scene is a square RGB image of 2..4 colored geometric shapes on a dark
background, one of which is the referred target.  Expressions come from a
closed grammar — "[size] color shape" or "color shape REL of color shape" —
and the generator only emits an expression after proving (by attribute and
relation filtering) that exactly one object in the scene satisfies it.  At
least one distractor always shares the target's shape or color, so the
language actually has to be read.

Generation is deterministic in (count, seed, image_size); each scene index
derives its own RNG stream, so disjoint index ranges can be produced in
parallel and still agree with a single sequential run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, GenerationError, UsageError

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
}
COLOR_NAMES = tuple(COLORS)
SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")
RELATIONS = ("left", "right", "above", "below")
BACKGROUND = 0.08
RELATION_DEAD_ZONE = 4  # pixels; avoids near-tie spatial relations
PLACEMENT_MARGIN = 2    # minimum gap between object bounding circles

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cx: int
    cy: int
    radius: int

    @property
    def bounding_radius(self) -> float:
        # squares are specified by half-side, so their corners stick out
        return self.radius * np.sqrt(2.0) if self.shape == "square" else float(self.radius)


@dataclass
class Scene:
    image: np.ndarray            # (3, S, S) float64 in [0, 1]
    objects: list[SceneObject]
    target_index: int
    expression: str
    gt_mask: np.ndarray          # (S, S) bool


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]
    index: dict[str, int] = field(hash=False, compare=False, default_factory=dict)

    @property
    def cls_id(self) -> int:
        return self.index[CLS_TOKEN]

    @property
    def pad_id(self) -> int:
        return self.index[PAD_TOKEN]

    def __len__(self) -> int:
        return len(self.words)


def build_vocab() -> Vocab:
    """The closed grammar's vocabulary in a fixed, stable order."""
    words = ([CLS_TOKEN, PAD_TOKEN] + list(COLORS) + list(SHAPES)
             + list(SIZES) + list(RELATIONS) + ["of"])
    return Vocab(tuple(words), {w: i for i, w in enumerate(words)})


# rasterization --------------------------------------------------------------

def rasterize(obj: SceneObject, size: int) -> np.ndarray:
    """Boolean mask of one object on an size x size canvas (pixel centers)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - obj.cx, yy - obj.cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= obj.radius ** 2
    if obj.shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= obj.radius
    # upward triangle: apex on top, flat base, inscribed in the radius
    r = float(obj.radius)
    ax, ay = obj.cx, obj.cy - r
    bx, by = obj.cx - r * np.sqrt(3.0) / 2.0, obj.cy + r / 2.0
    cx_, cy_ = obj.cx + r * np.sqrt(3.0) / 2.0, obj.cy + r / 2.0

    def half_plane(x1, y1, x2, y2):
        return (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)

    d1 = half_plane(ax, ay, bx, by)
    d2 = half_plane(bx, by, cx_, cy_)
    d3 = half_plane(cx_, cy_, ax, ay)
    return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)


def render(objects: list[SceneObject], size: int) -> np.ndarray:
    image = np.full((3, size, size), BACKGROUND)
    for obj in objects:
        mask = rasterize(obj, size)
        for ch, value in enumerate(COLORS[obj.color]):
            image[ch][mask] = value
    return image


# expression semantics --------------------------------------------------------

def relation_holds(rel: str, a: SceneObject, b: SceneObject) -> bool:
    """Spatial relation on centers with a dead zone around ties."""
    if rel == "left":
        return b.cx - a.cx > RELATION_DEAD_ZONE
    if rel == "right":
        return a.cx - b.cx > RELATION_DEAD_ZONE
    if rel == "above":
        return b.cy - a.cy > RELATION_DEAD_ZONE
    if rel == "below":
        return a.cy - b.cy > RELATION_DEAD_ZONE
    raise DataError(f"unknown relation {rel!r}")


def matching_objects(expression: str, objects: list[SceneObject]) -> list[int]:
    """Indices of the objects an expression denotes under the grammar."""
    words = expression.split()
    if not words:
        raise DataError("empty expression")
    if len(words) in (2, 3) and "of" not in words:
        size = None
        if len(words) == 3:
            size, color, shape = words
        else:
            color, shape = words
        return [k for k, o in enumerate(objects)
                if o.color == color and o.shape == shape
                and (size is None or o.size == size)]
    if len(words) == 6 and words[3] == "of":
        color, shape, rel = words[0], words[1], words[2]
        a_color, a_shape = words[4], words[5]
        hits = []
        for k, o in enumerate(objects):
            if o.color != color or o.shape != shape:
                continue
            anchors = [b for j, b in enumerate(objects)
                       if j != k and b.color == a_color and b.shape == a_shape]
            if any(relation_holds(rel, o, b) for b in anchors):
                hits.append(k)
        return hits
    raise DataError(f"expression {expression!r} is not in the grammar")


def _unique_expression(objects: list[SceneObject], target: int,
                       rng: np.random.Generator) -> str | None:
    """Shortest grammar expression that denotes exactly the target, if any."""
    t = objects[target]
    plain = f"{t.color} {t.shape}"
    if matching_objects(plain, objects) == [target]:
        return plain
    sized = f"{t.size} {t.color} {t.shape}"
    if matching_objects(sized, objects) == [target]:
        return sized
    anchors = [k for k in range(len(objects)) if k != target]
    rels = list(RELATIONS)
    rng.shuffle(anchors)
    rng.shuffle(rels)
    for rel in rels:
        for k in anchors:
            a = objects[k]
            expr = f"{t.color} {t.shape} {rel} of {a.color} {a.shape}"
            if matching_objects(expr, objects) == [target]:
                return expr
    return None


# scene generation -------------------------------------------------------------

def _radius_range(size_name: str, image_size: int) -> tuple[int, int]:
    if size_name == "small":
        return max(4, round(0.11 * image_size)), max(5, round(0.14 * image_size))
    return max(6, round(0.17 * image_size)), max(7, round(0.21 * image_size))


def _dilate(mask: np.ndarray, px: int) -> np.ndarray:
    """Chebyshev dilation by `px` pixels (keeps the margin test exact)."""
    out = mask.copy()
    for _ in range(px):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


def _place(attrs: list[tuple[str, str, str]], image_size: int,
           rng: np.random.Generator) -> list[SceneObject] | None:
    """Drop objects one by one, enforcing the pixel-exact placement margin."""
    objects: list[SceneObject] = []
    occupied = np.zeros((image_size, image_size), dtype=bool)
    for shape, color, size_name in attrs:
        lo, hi = _radius_range(size_name, image_size)
        placed = False
        for _ in range(40):
            radius = int(rng.integers(lo, hi + 1))
            bound = radius * np.sqrt(2.0) if shape == "square" else radius
            margin = int(np.ceil(bound)) + PLACEMENT_MARGIN
            if image_size - margin <= margin:
                return None
            cx = int(rng.integers(margin, image_size - margin))
            cy = int(rng.integers(margin, image_size - margin))
            cand = SceneObject(shape, color, size_name, cx, cy, radius)
            mask = rasterize(cand, image_size)
            if not (mask & occupied).any():
                objects.append(cand)
                occupied |= _dilate(mask, PLACEMENT_MARGIN)
                placed = True
                break
        if not placed:
            return None
    return objects


def generate_scene(seed: int, index: int, image_size: int,
                   attempts: int = 200) -> Scene:
    """Generate scene `index` of the stream `seed`; deterministic and
    independent of every other index."""
    rng = np.random.default_rng([seed, index])
    for _ in range(attempts):
        n_objects = int(rng.integers(2, 4))
        t_shape = str(rng.choice(SHAPES))
        t_color = str(rng.choice(COLOR_NAMES))
        t_size = str(rng.choice(SIZES))
        attrs = [(t_shape, t_color, t_size)]
        # the first distractor controls the expression type mix: mostly
        # attribute scenes, some size-disambiguated, a few relational
        roll = rng.uniform()
        if roll < 0.08:
            attrs.append((t_shape, t_color, str(rng.choice(SIZES))))
        elif roll < 0.20:
            other_size = "large" if t_size == "small" else "small"
            attrs.append((t_shape, t_color, other_size))
        elif roll < 0.60:
            color = str(rng.choice([c for c in COLOR_NAMES if c != t_color]))
            attrs.append((t_shape, color, str(rng.choice(SIZES))))
        else:
            shape = str(rng.choice([s for s in SHAPES if s != t_shape]))
            attrs.append((shape, t_color, str(rng.choice(SIZES))))
        for _k in range(2, n_objects):
            shape = str(rng.choice(SHAPES))
            color = str(rng.choice(COLOR_NAMES))
            for _redraw in range(3):
                if (shape, color) != (t_shape, t_color):
                    break
                shape = str(rng.choice(SHAPES))
                color = str(rng.choice(COLOR_NAMES))
            attrs.append((shape, color, str(rng.choice(SIZES))))
        objects = _place(attrs, image_size, rng)
        if objects is None:
            continue
        order = rng.permutation(n_objects)
        objects = [objects[k] for k in order]
        target = int(np.where(order == 0)[0][0])
        expression = _unique_expression(objects, target, rng)
        if expression is None:
            continue
        gt = rasterize(objects[target], image_size)
        if not gt.any():
            continue
        return Scene(render(objects, image_size), objects, target, expression, gt)
    raise GenerationError(
        f"scene {index} (seed {seed}, size {image_size}): no valid layout in "
        f"{attempts} attempts")


def generate_dataset(count: int, seed: int, image_size: int = 64) -> list[Scene]:
    if count < 1:
        raise UsageError(f"count must be >= 1, got {count}")
    return [generate_scene(seed, i, image_size) for i in range(count)]


# tokenization ---------------------------------------------------------------

def tokenize(vocab: Vocab, expression: str, max_tokens: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] + word ids + [PAD] fill; returns (ids, padding mask, True=PAD)."""
    words = expression.split()
    if not words:
        raise DataError("empty expression")
    unknown = [w for w in words if w not in vocab.index]
    if unknown:
        raise DataError(f"words not in vocabulary: {unknown}")
    if len(words) > max_tokens - 1:
        raise DataError(f"expression has {len(words)} words; max is {max_tokens - 1}")
    ids = np.full(max_tokens, vocab.pad_id, dtype=np.int64)
    ids[0] = vocab.cls_id
    for k, w in enumerate(words, start=1):
        ids[k] = vocab.index[w]
    padding = np.arange(max_tokens) > len(words)
    return ids, padding


def detokenize(vocab: Vocab, ids: np.ndarray) -> str:
    words = [vocab.words[i] for i in np.asarray(ids)
             if i not in (vocab.cls_id, vocab.pad_id)]
    return " ".join(words)


def split_dataset(scenes: list[Scene], val_fraction: float,
                  seed: int) -> tuple[list[Scene], list[Scene]]:
    """Deterministic disjoint shuffle-split into (train, val)."""
    if not 0.0 < val_fraction < 1.0:
        raise UsageError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(scenes)
    n_val = int(n * val_fraction)
    if n_val == 0 or n_val == n:
        raise UsageError(f"val_fraction {val_fraction} leaves an empty split for {n} scenes")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [scenes[i] for i in range(n) if i not in val_idx]
    val = [scenes[i] for i in range(n) if i in val_idx]
    return train, val


# on-disk layout ---------------------------------------------------------------

def save_dataset(scenes: list[Scene], out_dir) -> None:
    """Write images/NNNN.png, masks/NNNN.png, expressions.jsonl, vocab.txt."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, scene in enumerate(scenes):
        rgb = np.clip(np.round(scene.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb.transpose(1, 2, 0), mode="RGB").save(out / "images" / f"{i:04d}.png")
        mask8 = (scene.gt_mask.astype(np.uint8) * 255)
        Image.fromarray(mask8, mode="L").convert("1").save(out / "masks" / f"{i:04d}.png")
        records.append({
            "id": i,
            "expression": scene.expression,
            "target_index": scene.target_index,
            "objects": [{"shape": o.shape, "color": o.color, "size": o.size,
                         "center": [o.cx, o.cy], "radius": o.radius}
                        for o in scene.objects],
        })
    with open(out / "expressions.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "vocab.txt", "w", encoding="utf-8") as fh:
        for word in build_vocab().words:
            fh.write(word + "\n")


def load_dataset(data_dir) -> list[Scene]:
    root = Path(data_dir)
    path = root / "expressions.jsonl"
    if not path.exists():
        raise DataError(f"no expressions.jsonl under {root}")
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            i = rec["id"]
            rgb = np.asarray(Image.open(root / "images" / f"{i:04d}.png"),
                             dtype=np.float64) / 255.0
            mask = np.asarray(Image.open(root / "masks" / f"{i:04d}.png"), dtype=bool)
            objects = [SceneObject(o["shape"], o["color"], o["size"],
                                   o["center"][0], o["center"][1], o["radius"])
                       for o in rec["objects"]]
            scenes.append(Scene(rgb.transpose(2, 0, 1), objects,
                                rec["target_index"], rec["expression"], mask))
    return scenes
