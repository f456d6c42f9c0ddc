"""Grid-world multimodal QA with programmatic chain-of-thought.

Each scene places 3-8 coloured shapes on a G x G grid.  Questions need one
to three hops over the scene; every hop is spelled out as an explicit
reasoning step.  Steps are joined with a reserved delimiter token when a
sequence is built.  Images are never stored: they are re-rendered from the
scene description on load.
"""
from __future__ import annotations

import collections
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange")
PALETTE = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.1), "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1), "magenta": (0.85, 0.1, 0.85), "cyan": (0.1, 0.85, 0.9),
    "white": (1.0, 1.0, 1.0), "orange": (1.0, 0.55, 0.0),
}
DIRECTIONS = ("left", "right", "above", "below")
HALVES = ("top", "bottom", "left", "right")

SPECIALS = ("<pad>", "<latent>", "<sep>", "</a>")
WORDS = (
    "what", "color", "is", "the", "shape", "of", "above", "below", "how", "many",
    "shapes", "are", "in", "top", "bottom", "half", "row", "col", "at", "find",
    "nearest", "look", "from", "step", "so", "its", "it", "there", "those", "rows",
    "cols", "to", "go", "object", "a", "count", "none", ":", ",", "?", "which",
    "along", "grid", "keep", "only",
)
DIGITS = tuple(str(i) for i in range(10))
_BASE = SPECIALS + SHAPES + COLORS + DIGITS + ("left", "right") + WORDS
VOCAB = _BASE + tuple(f"<unused{i}>" for i in range(96 - len(_BASE)))
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}

PAD, LATENT, SEP, EOA = (TOKEN_ID[t] for t in SPECIALS)
QUESTION_LEN = 16
MAX_STEPS = 4
MAX_STEP_TOKENS = 16


class DataFormatError(ValueError):
    pass


def encode(words) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    return [TOKEN_ID[w] for w in words]


def decode(ids) -> list[str]:
    return [VOCAB[int(i)] for i in ids]


@dataclass
class Scene:
    grid: int
    objects: list                     # [row, col, shape, color]
    seed: int = 0

    def at(self, row: int, col: int):
        for o in self.objects:
            if o[0] == row and o[1] == col:
                return o
        return None

    def to_dict(self) -> dict:
        return {"grid": self.grid, "objects": [list(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict, seed: int = 0) -> "Scene":
        return cls(int(d["grid"]), [[int(o[0]), int(o[1]), str(o[2]), str(o[3])]
                                    for o in d["objects"]], seed)


@dataclass
class Example:
    id: int
    seed: int
    scene: Scene
    question: list
    steps: list
    answer: list
    image_side: int = 80
    meta: dict = field(default_factory=dict)
    _image: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = render_scene(self.scene, self.image_side)
        return self._image

    @property
    def cot(self) -> list[int]:
        """Explicit reasoning tokens: every step followed by the delimiter."""
        out: list[int] = []
        for s in self.steps:
            out.extend(s)
            out.append(SEP)
        return out

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "seed": self.seed, "scene": self.scene.to_dict(),
                           "question": list(self.question), "steps": [list(s) for s in self.steps],
                           "answer": list(self.answer)}, separators=(",", ":"))


# ---------------------------------------------------------------------------
# rendering

def _shape_mask(shape: str, cell: int) -> np.ndarray:
    yy, xx = np.mgrid[0:cell, 0:cell] + 0.5
    c = cell / 2.0
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (0.42 * cell) ** 2
    if shape == "square":
        m = max(1, cell // 8)
        return (yy > m) & (yy < cell - m) & (xx > m) & (xx < cell - m)
    if shape == "triangle":
        top, bot = 0.1 * cell, 0.9 * cell
        half = (yy - top) / (bot - top) * (0.45 * cell)
        return (yy >= top) & (yy <= bot) & (np.abs(xx - c) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: Scene, image_side: int = 80) -> np.ndarray:
    """RGB image in [0, 1]; each object is drawn inside its own cell."""
    if image_side % scene.grid:
        raise ValueError("image side must be a multiple of the grid size")
    cell = image_side // scene.grid
    img = np.zeros((image_side, image_side, 3), dtype=np.float64)
    for row, col, shape, color in scene.objects:
        mask = _shape_mask(shape, cell)
        patch = img[row * cell:(row + 1) * cell, col * cell:(col + 1) * cell]
        patch[mask] = PALETTE[color]
    return img


# ---------------------------------------------------------------------------
# scene queries shared by the generator

def _neighbour(scene: Scene, row: int, col: int, direction: str):
    best = None
    for o in scene.objects:
        r, c = o[0], o[1]
        if direction == "left" and r == row and c < col:
            key = col - c
        elif direction == "right" and r == row and c > col:
            key = c - col
        elif direction == "above" and c == col and r < row:
            key = row - r
        elif direction == "below" and c == col and r > row:
            key = r - row
        else:
            continue
        if best is None or key < best[0]:
            best = (key, o)
    return None if best is None else best[1]


def _in_half(grid: int, row: int, col: int, half: str) -> bool:
    mid = grid // 2
    return {"top": row < mid, "bottom": row >= mid,
            "left": col < mid, "right": col >= mid}[half]


def _random_scene(rng: np.random.Generator, grid: int, seed: int) -> Scene:
    n = int(rng.integers(3, 9))
    cells = rng.choice(grid * grid, size=n, replace=False)
    objects = [[int(c // grid), int(c % grid), SHAPES[int(rng.integers(3))],
                COLORS[int(rng.integers(len(COLORS)))]] for c in cells]
    objects.sort(key=lambda o: (o[0], o[1]))
    return Scene(grid, objects, seed)


def _pad_question(words: list[str]) -> list[int]:
    ids = encode(words)
    if len(ids) > QUESTION_LEN:
        raise AssertionError(f"question too long: {words}")
    return ids + [PAD] * (QUESTION_LEN - len(ids))


def _unique_objects(scene: Scene) -> list:
    counts = collections.Counter((o[2], o[3]) for o in scene.objects)
    return [o for o in scene.objects if counts[(o[2], o[3])] == 1]


def _try_relation(scene: Scene, rng):
    options = []
    for o in _unique_objects(scene):
        for d in DIRECTIONS:
            t = _neighbour(scene, o[0], o[1], d)
            if t is not None:
                options.append((o, d, t))
    if not options:
        return None
    anchor, d, target = options[int(rng.integers(len(options)))]
    r, c = anchor[0], anchor[1]
    q = ["what", "color", "is", "the", "shape", d, "of", "the", anchor[3], anchor[2], "?"]
    along = ["along", "row", str(r)] if d in ("left", "right") else ["along", "col", str(c)]
    steps = [
        ["step", "1", ":", "find", "the", anchor[3], anchor[2], ",", "it", "is", "at", "row",
         str(r), "col", str(c)],
        ["step", "2", ":", "look", d, along[0], along[1], along[2], "from", "row", str(r),
         "col", str(c)],
        ["step", "3", ":", "nearest", "is", "the", target[3], target[2], "at", "row",
         str(target[0]), "col", str(target[1])],
        ["step", "4", ":", "so", "its", "color", "is", target[3]],
    ]
    cells = [(r, c), (r, c), (target[0], target[1]), (target[0], target[1])]
    return "relation", q, steps, [target[3]], cells


def _try_count(scene: Scene, rng):
    colors = [col for col in COLORS
              if 1 <= sum(o[3] == col for o in scene.objects) <= 3]
    if not colors:
        return None
    color = colors[int(rng.integers(len(colors)))]
    half = HALVES[int(rng.integers(len(HALVES)))]
    hits = [o for o in scene.objects if o[3] == color]
    kept = [o for o in hits if _in_half(scene.grid, o[0], o[1], half)]
    q = ["how", "many", color, "shapes", "are", "in", "the", half, "half", "?"]
    listing: list[str] = []
    for i, o in enumerate(hits):
        if i:
            listing.append(",")
        listing += [str(o[0]), str(o[1])]
    mid = scene.grid // 2
    lo, hi = (0, mid - 1) if half in ("top", "left") else (mid, scene.grid - 1)
    axis = "rows" if half in ("top", "bottom") else "cols"
    steps = [
        ["step", "1", ":", color, "shapes", "at"] + listing,
        ["step", "2", ":", "the", half, "half", "is", axis, str(lo), "to", str(hi)],
        ["step", "3", ":", "keep", "only", "those", "in", axis, str(lo), "to", str(hi)],
        ["step", "4", ":", "so", "the", "count", "is", str(len(kept))],
    ]
    cells = [(hits[0][0], hits[0][1])] * 4
    return "count", q, steps[:3] + [steps[3]], [str(len(kept))], cells


def _try_lookup(scene: Scene, rng):
    o = scene.objects[int(rng.integers(len(scene.objects)))]
    r, c = o[0], o[1]
    q = ["what", "shape", "is", "at", "row", str(r), "col", str(c), "?"]
    steps = [
        ["step", "1", ":", "go", "to", "row", str(r), "col", str(c), "in", "the", "grid"],
        ["step", "2", ":", "the", "object", "there", "is", "a", o[3], o[2]],
    ]
    return "lookup", q, steps, [o[2]], [(r, c), (r, c)]


def _try_pair(scene: Scene, rng):
    """Shape of the nearest neighbour in a direction (three hops)."""
    found = _try_relation(scene, rng)
    if found is None:
        return None
    _, q, steps, _, cells = found
    target = scene.at(*cells[2])
    q = ["which", "shape", "is", q[5], "of", "the", q[8], q[9], "?"]
    steps = steps[:3]
    return "pair", q, steps, [target[2]], cells[:3]


TEMPLATES = {"relation": _try_relation, "count": _try_count, "lookup": _try_lookup,
             "pair": _try_pair}
TEMPLATE_WEIGHTS = {"relation": 0.4, "count": 0.3, "pair": 0.15, "lookup": 0.15}


def generate_example(seed: int, index: int, grid: int = 10, image_side: int = 80,
                     templates: dict | None = None) -> Example:
    weights = templates or TEMPLATE_WEIGHTS
    names = sorted(weights)
    probs = np.array([weights[n] for n in names], dtype=np.float64)
    probs /= probs.sum()
    rng = stream(seed, "data", index)
    name = names[int(rng.choice(len(names), p=probs))]
    for attempt in range(1000):
        scene = _random_scene(rng, grid, seed)
        found = TEMPLATES[name](scene, rng)
        if found is not None:
            break
    else:  # pragma: no cover - every template succeeds on some scene
        raise RuntimeError(f"could not build a {name} example")
    kind, q, steps, answer, cells = found
    ex = Example(index, seed, scene, _pad_question(q), [encode(s) for s in steps],
                 encode(answer) + [EOA], image_side,
                 meta={"template": kind, "hops": len(steps), "step_cells": cells})
    for s in ex.steps:
        assert len(s) <= MAX_STEP_TOKENS, decode(s)
    return ex


def generate_dataset(seed: int, n: int, grid: int = 10, image_side: int = 80,
                     templates: dict | None = None) -> list[Example]:
    """``n`` examples, fully determined by ``seed`` (each index has its own stream)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_example(seed, i, grid, image_side, templates) for i in range(n)]


# ---------------------------------------------------------------------------
# independent answer checker: parses the question tokens, never the steps

def evaluate_question(scene: Scene, question) -> str:
    words = [w for w in decode(question) if w != "<pad>"]
    if words[:2] == ["what", "color"]:
        direction, color, shape = words[5], words[8], words[9]
        anchors = [o for o in scene.objects if o[2] == shape and o[3] == color]
        if len(anchors) != 1:
            raise ValueError("anchor is not unique")
        row, col = anchors[0][0], anchors[0][1]
        return _walk(scene, row, col, direction)[3]
    if words[:2] == ["which", "shape"]:
        direction, color, shape = words[3], words[6], words[7]
        anchors = [o for o in scene.objects if o[2] == shape and o[3] == color]
        row, col = anchors[0][0], anchors[0][1]
        return _walk(scene, row, col, direction)[2]
    if words[:2] == ["how", "many"]:
        color, half = words[2], words[7]
        mid = scene.grid // 2
        n = 0
        for r, c, _, col in scene.objects:
            if col != color:
                continue
            pos = r if half in ("top", "bottom") else c
            if (pos < mid) == (half in ("top", "left")):
                n += 1
        return str(n)
    if words[:2] == ["what", "shape"]:
        r, c = int(words[5]), int(words[7])
        for o in scene.objects:
            if (o[0], o[1]) == (r, c):
                return o[2]
        raise ValueError("no object at the queried cell")
    raise ValueError(f"unrecognised question: {' '.join(words)}")


def _walk(scene: Scene, row: int, col: int, direction: str):
    dr, dc = {"left": (0, -1), "right": (0, 1), "above": (-1, 0), "below": (1, 0)}[direction]
    r, c = row + dr, col + dc
    while 0 <= r < scene.grid and 0 <= c < scene.grid:
        o = scene.at(r, c)
        if o is not None:
            return o
        r, c = r + dr, c + dc
    raise ValueError("no object in that direction")


# ---------------------------------------------------------------------------
# persistence

FIELDS = ("id", "seed", "scene", "question", "steps", "answer")


def save_dataset(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def _template_of(question) -> str:
    words = decode(question[:2])
    return {("what", "color"): "relation", ("which", "shape"): "pair",
            ("how", "many"): "count", ("what", "shape"): "lookup"}.get(tuple(words), "unknown")


def parse_line(line: str, lineno: int, image_side: int = 80) -> Example:
    try:
        rec = json.loads(line)
        if not isinstance(rec, dict) or set(rec) != set(FIELDS):
            raise DataFormatError(f"expected fields {FIELDS}")
        scene = Scene.from_dict(rec["scene"], int(rec["seed"]))
        steps = [[int(t) for t in s] for s in rec["steps"]]
        question = [int(t) for t in rec["question"]]
        answer = [int(t) for t in rec["answer"]]
        for ids in [question, answer, *steps]:
            if any(not 0 <= t < len(VOCAB) for t in ids):
                raise DataFormatError("token id outside the vocabulary")
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"line {lineno}: {exc}") from exc
    return Example(int(rec["id"]), int(rec["seed"]), scene, question, steps, answer, image_side,
                   meta={"template": _template_of(question), "hops": len(steps)})


def load_dataset(path, image_side: int = 80) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                out.append(parse_line(line, lineno, image_side))
    return out


def dataset_stats(examples) -> list[tuple]:
    """(histogram, bucket, count) rows: CoT length (10-token bins), step count, template."""
    rows = []
    cot = collections.Counter(10 * (len(ex.cot) // 10) for ex in examples)
    rows += [("cot_length", f"{b}-{b + 9}", n) for b, n in sorted(cot.items())]
    steps = collections.Counter(len(ex.steps) for ex in examples)
    rows += [("step_count", str(b), n) for b, n in sorted(steps.items())]
    topics = collections.Counter(_template_of(ex.question) for ex in examples)
    rows += [("template", b, n) for b, n in sorted(topics.items())]
    return rows


def write_stats(examples, path) -> int:
    rows = dataset_stats(examples)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["histogram", "bucket", "count"])
        w.writerows(rows)
    return len(rows)
