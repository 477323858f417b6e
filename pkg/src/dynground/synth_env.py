"""Procedural scenes and templated referring expressions.

A scene is a small grid of coloured shapes. Expressions name one object either
by its attributes alone (one hop) or through a chain of spatial relations
("the square left of the blue circle that is above the green triangle"), so
the number of hops is a controllable proxy for expression complexity.

Relations are evaluated on cell coordinates: ``left of`` / ``right of`` mean
same row, smaller / larger column; ``above`` / ``below`` mean same column,
smaller / larger row.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SIZES = ("small", "large")
RELATIONS = ("left", "right", "above", "below")

RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.85),
    "cyan": (0.1, 0.85, 0.9),
}
BACKGROUND = (0.0, 0.0, 0.0)

# Side length in pixels at the default 8-pixel cell.
SIZE_PX = {"small": 4, "large": 6}

PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"
PAD_ID, CLS_ID, SEP_ID = 0, 1, 2
N_MAX = 20
MAX_HOPS = 3

_RELATION_WORDS = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}
VOCAB: tuple[str, ...] = (
    (PAD, CLS, SEP, "the", "that", "is", "of")
    + tuple(r for r in RELATIONS)
    + SIZES
    + COLORS
    + SHAPES
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)


class NoUniqueReferent(ValueError):
    """No unambiguous expression could be sampled for the requested target."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def clamp(self, size: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x_min, 0.0), size),
            min(max(self.y_min, 0.0), size),
            min(max(self.x_max, 0.0), size),
            min(max(self.y_max, 0.0), size),
        )

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cell: tuple[int, int]
    cell_px: int = 8

    @property
    def pixel_box(self) -> BoundingBox:
        side = SIZE_PX[self.size] * self.cell_px // 8
        margin = (self.cell_px - side) // 2
        row, col = self.cell
        x0 = col * self.cell_px + margin
        y0 = row * self.cell_px + margin
        return BoundingBox(x0, y0, x0 + side, y0 + side)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size,
                "cell": list(self.cell), "pixel_box": self.pixel_box.as_list()}


@dataclass(frozen=True)
class SceneSpec:
    grid_size: int
    objects: tuple[SceneObject, ...]
    seed: int

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        if len(self.objects) < 2:
            raise ValueError("a scene needs at least two objects")
        for r, c in cells:
            if not (0 <= r < self.grid_size and 0 <= c < self.grid_size):
                raise ValueError(f"cell {(r, c)} outside a {self.grid_size} grid")


@dataclass(frozen=True)
class Phrase:
    """A definite noun phrase: a shape plus optional colour and size."""

    shape: str
    color: str | None = None
    size: str | None = None

    def matches(self, obj: SceneObject) -> bool:
        return (obj.shape == self.shape
                and (self.color is None or obj.color == self.color)
                and (self.size is None or obj.size == self.size))

    def words(self) -> list[str]:
        out = ["the"]
        if self.size:
            out.append(self.size)
        if self.color:
            out.append(self.color)
        out.append(self.shape)
        return out


@dataclass(frozen=True)
class Expression:
    """``phrases[0] rel[0] phrases[1] rel[1] phrases[2] ...``"""

    phrases: tuple[Phrase, ...]
    relations: tuple[str, ...] = ()

    @property
    def hop_count(self) -> int:
        return len(self.relations) + 1

    def words(self) -> list[str]:
        out = list(self.phrases[0].words())
        for i, (rel, phrase) in enumerate(zip(self.relations, self.phrases[1:])):
            if i > 0:
                out += ["that", "is"]
            out += list(_RELATION_WORDS[rel]) + phrase.words()
        return out

    def text(self) -> str:
        return " ".join(self.words())


@dataclass
class GroundingInstance:
    scene: SceneSpec
    target_index: int
    expression: Expression
    tokens: list[int]
    token_text: list[str]
    gt_box: BoundingBox
    hop_count: int
    seed: int
    image_px: int = 64
    _image: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = render(self.scene, self.image_px)
        return self._image


def related(rel: str, a: SceneObject, b: SceneObject) -> bool:
    """True when ``a`` stands in relation ``rel`` to ``b``."""
    (ra, ca), (rb, cb) = a.cell, b.cell
    if rel == "left":
        return ra == rb and ca < cb
    if rel == "right":
        return ra == rb and ca > cb
    if rel == "above":
        return ca == cb and ra < rb
    if rel == "below":
        return ca == cb and ra > rb
    raise ValueError(f"unknown relation {rel!r}")


def resolve(scene: SceneSpec, expr: Expression) -> list[int]:
    """Indices of objects satisfying the whole expression, innermost phrase first."""
    objs = scene.objects
    cand = [i for i, o in enumerate(objs) if expr.phrases[-1].matches(o)]
    for phrase, rel in zip(reversed(expr.phrases[:-1]), reversed(expr.relations)):
        cand = [i for i, o in enumerate(objs)
                if phrase.matches(o) and any(related(rel, o, objs[j]) for j in cand)]
    return cand


def generate_scene(seed: int, grid_size: int = 8, n_objects: int = 6) -> SceneSpec:
    if n_objects > grid_size * grid_size:
        raise ValueError(f"cannot place {n_objects} objects on a {grid_size}x{grid_size} grid")
    if n_objects < 2:
        raise ValueError("n_objects must be at least 2")
    rng = np.random.default_rng(seed)
    flat = rng.choice(grid_size * grid_size, size=n_objects, replace=False)
    objects = tuple(
        SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=SIZES[rng.integers(len(SIZES))],
            cell=(int(f) // grid_size, int(f) % grid_size),
        )
        for f in flat
    )
    return SceneSpec(grid_size=grid_size, objects=objects, seed=int(seed))


def _phrase_options(obj: SceneObject) -> list[Phrase]:
    return [Phrase(obj.shape, c, s) for c, s in product((None, obj.color), (None, obj.size))]


def _count(scene: SceneSpec, phrase: Phrase) -> int:
    return sum(phrase.matches(o) for o in scene.objects)


def generate_expression(scene: SceneSpec, target_index: int, hops: int,
                        seed: int, max_attempts: int = 100) -> tuple[list[str], int]:
    """Sample an unambiguous expression for ``scene.objects[target_index]``.

    For ``hops > 1`` every phrase except the innermost is ambiguous on its own,
    so the relations are needed to single the target out; every intermediate
    definite phrase also resolves to exactly one object.

    Returns ``(token_text, hop_count)`` with ``[CLS]``/``[SEP]`` attached and no
    padding.
    """
    expr = sample_expression(scene, target_index, hops, seed, max_attempts)
    return [CLS] + expr.words() + [SEP], expr.hop_count


def sample_expression(scene: SceneSpec, target_index: int, hops: int,
                      seed: int, max_attempts: int = 100) -> Expression:
    if not 1 <= hops <= MAX_HOPS:
        raise ValueError(f"hops must be in [1, {MAX_HOPS}], got {hops}")
    rng = np.random.default_rng(seed)
    objs = scene.objects
    target = objs[target_index]
    for _ in range(max_attempts):
        chain = [target_index]
        rels: list[str] = []
        ok = True
        for _ in range(hops - 1):
            cur = objs[chain[-1]]
            options = [(rel, j) for j, o in enumerate(objs) for rel in RELATIONS
                       if j not in chain and related(rel, cur, o)]
            if not options:
                ok = False
                break
            rel, j = options[rng.integers(len(options))]
            rels.append(rel)
            chain.append(j)
        if not ok:
            continue
        phrases = []
        for pos, idx in enumerate(chain):
            opts = _phrase_options(objs[idx])
            innermost = pos == len(chain) - 1
            if innermost:
                opts = [p for p in opts if _count(scene, p) == 1]
            else:
                opts = [p for p in opts if _count(scene, p) >= 2]
            if not opts:
                ok = False
                break
            phrases.append(opts[rng.integers(len(opts))])
        if not ok:
            continue
        expr = Expression(tuple(phrases), tuple(rels))
        if len(expr.words()) + 2 > N_MAX:
            continue
        # every definite phrase in the chain must pick out a single object
        if all(resolve(scene, Expression(expr.phrases[k:], expr.relations[k:])) == [chain[k]]
               for k in range(len(chain))):
            return expr
    raise NoUniqueReferent(
        f"no unique {hops}-hop expression for object {target_index} after {max_attempts} attempts")


def encode_tokens(token_text: Sequence[str], n_max: int = N_MAX) -> list[int]:
    if len(token_text) > n_max:
        raise ValueError(f"expression has {len(token_text)} tokens, limit is {n_max}")
    ids = [WORD_TO_ID[w] for w in token_text]
    return ids + [PAD_ID] * (n_max - len(ids))


def _object_mask(obj: SceneObject) -> tuple[BoundingBox, np.ndarray]:
    box = obj.pixel_box
    side = int(box.width)
    yy, xx = np.mgrid[0:side, 0:side]
    if obj.shape == "square":
        mask = np.ones((side, side), dtype=bool)
    elif obj.shape == "circle":
        c = (side - 1) / 2.0
        r = side / 2.0
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    else:
        # apex on top row, full-width base on the bottom row
        half = (yy + 1) * side / (2.0 * side)
        mask = np.abs(xx + 0.5 - side / 2.0) <= half
    return box, mask


def render(scene: SceneSpec, image_px: int = 64) -> np.ndarray:
    if image_px % scene.grid_size:
        raise ValueError("image_px must be divisible by grid_size")
    cell_px = image_px // scene.grid_size
    img = np.empty((image_px, image_px, 3), dtype=np.float32)
    img[:] = BACKGROUND
    for obj in scene.objects:
        obj = SceneObject(obj.shape, obj.color, obj.size, obj.cell, cell_px)
        box, mask = _object_mask(obj)
        y0, x0 = int(box.y_min), int(box.x_min)
        side = mask.shape[0]
        img[y0:y0 + side, x0:x0 + side][mask] = RGB[obj.color]
    return img


def _instance_rng_seed(seed: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1, np.uint64)[0])


def make_instance(seed: int, hops: int, grid_size: int = 8, image_px: int = 64,
                  n_objects: tuple[int, int] = (6, 10)) -> GroundingInstance:
    """Deterministically build one instance with the requested hop count."""
    rng = np.random.default_rng(seed)
    for attempt in range(1000):
        n = int(rng.integers(n_objects[0], n_objects[1] + 1))
        scene = generate_scene(_instance_rng_seed(seed, attempt), grid_size, n)
        target = int(rng.integers(n))
        try:
            expr = sample_expression(scene, target, hops, int(rng.integers(2**63)))
        except NoUniqueReferent:
            continue
        return _build_instance(scene, target, expr, seed, image_px)
    raise NoUniqueReferent(f"seed {seed}: gave up building a {hops}-hop instance")


def _build_instance(scene, target, expr, seed, image_px):
    cell_px = image_px // scene.grid_size
    text = [CLS] + expr.words() + [SEP]
    obj = scene.objects[target]
    box = SceneObject(obj.shape, obj.color, obj.size, obj.cell, cell_px).pixel_box
    return GroundingInstance(
        scene=scene, target_index=target, expression=expr, tokens=encode_tokens(text),
        token_text=text, gt_box=box, hop_count=expr.hop_count, seed=int(seed),
        image_px=image_px)


def parse_hops_mix(spec: str) -> dict[int, float]:
    """Parse ``"1:0.5,2:0.3,3:0.2"``; proportions must be positive and sum to 1."""
    mix: dict[int, float] = {}
    try:
        for part in spec.split(","):
            h, p = part.split(":")
            mix[int(h)] = float(p)
    except ValueError:
        raise ValueError(f"malformed hops mix {spec!r}") from None
    if not mix or any(h < 1 or h > MAX_HOPS for h in mix) or any(p <= 0 for p in mix.values()):
        raise ValueError(f"invalid hops mix {spec!r}")
    if abs(sum(mix.values()) - 1.0) > 1e-6:
        raise ValueError(f"hops mix {spec!r} does not sum to 1")
    return mix


def generate_dataset(n: int, seed: int, hops_mix: dict[int, float] | None = None,
                     grid_size: int = 8, image_px: int = 64) -> list[GroundingInstance]:
    hops_mix = hops_mix or {1: 1 / 3, 2: 1 / 3, 3: 1 / 3}
    hops = sorted(hops_mix)
    probs = np.array([hops_mix[h] for h in hops])
    rng = np.random.default_rng(seed)
    draws = rng.choice(len(hops), size=n, p=probs / probs.sum())
    seeds = np.random.SeedSequence(seed).generate_state(n, np.uint64)
    return [make_instance(int(s) >> 1, hops[d], grid_size, image_px)
            for s, d in zip(seeds, draws)]


def instance_to_record(inst: GroundingInstance) -> dict:
    return {
        "seed": inst.seed,
        "grid_size": inst.scene.grid_size,
        "image_px": inst.image_px,
        "scene_seed": inst.scene.seed,
        "target_index": inst.target_index,
        "objects": [o.to_dict() for o in inst.scene.objects],
        "expression_text": inst.expression.text(),
        "token_ids": inst.tokens,
        "gt_box": inst.gt_box.as_list(),
        "hop_count": inst.hop_count,
    }


def record_to_instance(rec: dict) -> GroundingInstance:
    grid = rec["grid_size"]
    objects = tuple(SceneObject(o["shape"], o["color"], o["size"], tuple(o["cell"]))
                    for o in rec["objects"])
    scene = SceneSpec(grid, objects, rec.get("scene_seed", rec["seed"]))
    words = rec["expression_text"].split()
    expr = _parse_words(words)
    inst = _build_instance(scene, rec["target_index"], expr, rec["seed"],
                           rec.get("image_px", grid * 8))
    if inst.tokens != rec["token_ids"]:
        raise ValueError(f"instance {rec['seed']}: token ids do not match expression text")
    return inst


def _parse_words(words: list[str]) -> Expression:
    phrases, rels = [], []
    i = 0

    def phrase_at(i):
        if words[i] != "the":
            raise ValueError(f"expected 'the' at word {i}")
        i += 1
        size = color = None
        if words[i] in SIZES:
            size, i = words[i], i + 1
        if words[i] in COLORS:
            color, i = words[i], i + 1
        return Phrase(words[i], color, size), i + 1

    p, i = phrase_at(i)
    phrases.append(p)
    while i < len(words):
        if words[i] == "that":
            i += 2
        rel = words[i]
        i += 2 if rel in ("left", "right") else 1
        rels.append(rel)
        p, i = phrase_at(i)
        phrases.append(p)
    return Expression(tuple(phrases), tuple(rels))


def save_jsonl(instances: Iterable[GroundingInstance], path: str | os.PathLike) -> None:
    parent = os.path.dirname(os.fspath(path)) or "."
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(instance_to_record(inst), sort_keys=True) + "\n")


def load_jsonl(path: str | os.PathLike) -> list[GroundingInstance]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path) as f:
        return [record_to_instance(json.loads(line)) for line in f if line.strip()]
