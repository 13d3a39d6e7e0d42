"""Miniature CSS-style benchmark: 3x3 grid scenes, templated modification
commands, flat 2-D renders, and a JSON-lines triplet manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .netpbm import read_image, write_pnm
from .text_encoder import Vocabulary, tokenize

COLORS = {
    "red": (173, 35, 35),
    "yellow": (255, 238, 51),
    "green": (29, 105, 20),
    "cyan": (41, 208, 208),
    "blue": (42, 75, 215),
    "purple": (129, 38, 192),
    "brown": (129, 74, 25),
    "gray": (150, 150, 150),
}
# caption word -> 2-D proxy drawn
SHAPES = {"sphere": "circle", "cube": "square", "cylinder": "triangle"}
SIZES = ("small", "large")
POSITIONS = (
    "top-left", "top-center", "top-right",
    "middle-left", "middle-center", "middle-right",
    "bottom-left", "bottom-center", "bottom-right",
)
BACKGROUND = (24, 24, 24)
VERBS = ("make", "remove", "add")
MIN_OBJECTS, MAX_OBJECTS = 2, 6


class CommandError(ValueError):
    """Command not applicable to the scene."""


def cell_of(position: str) -> tuple:
    return divmod(POSITIONS.index(position), 3)


def position_of(cell: tuple) -> str:
    return POSITIONS[cell[0] * 3 + cell[1]]


@dataclass(frozen=True, order=True)
class SceneObject:
    cell: tuple
    shape: str
    color: str
    size: str


@dataclass(frozen=True)
class Scene:
    objects: tuple = ()

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("at most one object per cell")
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def at(self, cell) -> Optional[SceneObject]:
        for o in self.objects:
            if o.cell == tuple(cell):
                return o
        return None

    def key(self) -> str:
        return ";".join(f"{o.cell[0]}{o.cell[1]}:{o.shape}:{o.color}:{o.size}" for o in self.objects)

    def digest(self) -> str:
        return hashlib.sha1(self.key().encode("ascii")).hexdigest()[:16]


@dataclass(frozen=True)
class ModCommand:
    """verb + selector + argument.

    make:   selector (color, shape), argument a size or color word
    remove: selector (color, shape) or a position word, no argument
    add:    selector a position word, argument (color, shape); added objects are large
    """

    verb: str
    selector: object
    argument: object = None


def gen_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    cells = rng.choice(9, size=n, replace=False)
    shapes, colors = list(SHAPES), list(COLORS)
    objs = [SceneObject(divmod(int(c), 3), shapes[rng.integers(3)], colors[rng.integers(8)],
                        SIZES[rng.integers(2)]) for c in cells]
    return Scene(tuple(objs))


def _matches(o: SceneObject, selector) -> bool:
    if isinstance(selector, str):
        return o.cell == cell_of(selector)
    color, shape = selector
    return o.color == color and o.shape == shape


def apply_command(s: Scene, c: ModCommand) -> Scene:
    if c.verb == "add":
        cell = cell_of(c.selector)
        if s.at(cell) is not None:
            raise CommandError(f"cell {c.selector} is occupied")
        color, shape = c.argument
        return Scene(s.objects + (SceneObject(cell, shape, color, "large"),))
    hit = [o for o in s.objects if _matches(o, c.selector)]
    if not hit:
        raise CommandError(f"no object matches {c.selector!r}")
    if c.verb == "remove":
        return Scene(tuple(o for o in s.objects if o not in hit))
    if c.verb == "make":
        if isinstance(c.selector, str):
            raise CommandError("make selects by color and shape")
        field = "size" if c.argument in SIZES else "color" if c.argument in COLORS else None
        if field is None:
            raise CommandError(f"cannot make an object {c.argument!r}")
        return Scene(tuple(replace(o, **{field: c.argument}) if o in hit else o for o in s.objects))
    raise CommandError(f"unknown verb {c.verb!r}")


def invert(s: Scene, c: ModCommand) -> Optional[ModCommand]:
    """Command undoing ``c`` on ``s``, when one exists in the grammar."""
    if c.verb == "add":
        return ModCommand("remove", c.selector)
    if c.verb == "remove" and isinstance(c.selector, str):
        o = s.at(cell_of(c.selector))
        if o is not None and o.size == "large":
            return ModCommand("add", c.selector, (o.color, o.shape))
    return None


def caption(c: ModCommand) -> str:
    if c.verb == "make":
        color, shape = c.selector
        return f"make {color} {shape} {c.argument}"
    if c.verb == "remove":
        if isinstance(c.selector, str):
            return f"remove {c.selector}"
        return "remove {} {}".format(*c.selector)
    if c.verb == "add":
        color, shape = c.argument
        return f"add {color} {shape} to {c.selector}"
    raise CommandError(f"unknown verb {c.verb!r}")


def vocabulary_words() -> list:
    words = list(VERBS) + ["to"] + list(COLORS) + list(SHAPES) + list(SIZES) + list(POSITIONS)
    return sorted({w for p in words for w in tokenize(p).words})


def random_command(s: Scene, rng: np.random.Generator) -> ModCommand:
    """A command that changes ``s``."""
    verbs = ["make", "remove"] + (["add"] if len(s.objects) < 9 else [])
    verb = verbs[rng.integers(len(verbs))]
    if verb == "add":
        free = [p for p in POSITIONS if s.at(cell_of(p)) is None]
        pos = free[rng.integers(len(free))]
        return ModCommand("add", pos, (list(COLORS)[rng.integers(8)], list(SHAPES)[rng.integers(3)]))
    o = s.objects[rng.integers(len(s.objects))]
    if verb == "remove":
        sel = position_of(o.cell) if rng.random() < 0.5 else (o.color, o.shape)
        return ModCommand("remove", sel)
    if rng.random() < 0.5:
        value = "small" if o.size == "large" else "large"
    else:
        others = [c for c in COLORS if c != o.color]
        value = others[rng.integers(len(others))]
    return ModCommand("make", (o.color, o.shape), value)


# ---------------------------------------------------------------------------
# rendering

def render_pixels(s: Scene, px: int) -> np.ndarray:
    """uint8 (px, px, 3) raster of the scene."""
    if px <= 0 or px % 48:
        raise ValueError(f"render size must be a positive multiple of 48, got {px}")
    img = np.empty((px, px, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    cell = px / 3.0
    yy, xx = np.mgrid[0:px, 0:px] + 0.5
    for o in s.objects:
        cy, cx = (o.cell[0] + 0.5) * cell, (o.cell[1] + 0.5) * cell
        half = (0.4 if o.size == "large" else 0.2) * cell
        dy, dx = yy - cy, xx - cx
        kind = SHAPES[o.shape]
        if kind == "circle":
            inside = dy * dy + dx * dx <= half * half
        elif kind == "square":
            inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        else:  # apex-up isosceles triangle filling the bounding square
            inside = (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
        img[inside] = COLORS[o.color]
    return img


def render(s: Scene, px: int = 48) -> np.ndarray:
    """Float image in [0, 1], shape (px, px, 3)."""
    return render_pixels(s, px).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class TripletRecord:
    query: str
    caption: str
    target: str
    category: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps({"query": self.query, "caption": self.caption,
                           "target": self.target, "category": self.category})


def _split_records(rng_seed, n, queries_per_scene, taken: set, px, img_dir: Path, split_id: int,
                   written: set):
    records, scene_idx = [], 0
    while len(records) < n:
        rng = np.random.default_rng([rng_seed, split_id, scene_idx])
        scene_idx += 1
        src = gen_scene(rng)
        if src.digest() in taken:
            continue
        want = min(queries_per_scene, n - len(records))
        local, tries = [], 0
        while len(local) < want and tries < 50 * queries_per_scene:
            tries += 1
            cmd = random_command(src, rng)
            tgt = apply_command(src, cmd)
            if tgt.digest() in taken or tgt.digest() == src.digest() or any(t.digest() == tgt.digest() for _, t in local):
                continue
            local.append((cmd, tgt))
        if not local:
            continue
        taken.add(src.digest())
        for cmd, tgt in local:
            taken.add(tgt.digest())
            for sc in (src, tgt):
                if sc.digest() not in written:
                    write_pnm(img_dir / f"{sc.digest()}.ppm", render_pixels(sc, px))
                    written.add(sc.digest())
            records.append(TripletRecord(f"images/{src.digest()}.ppm", caption(cmd),
                                         f"images/{tgt.digest()}.ppm", cmd.verb))
    return records


def gen_dataset(n_train: int = 2000, n_test: int = 500, seed: int = 0, out_dir="data",
                px: int = 48, queries_per_scene: int = 8) -> dict:
    """Write images, manifests and vocabulary under ``out_dir``.

    Every source and target scene is unique across the whole dataset, so the
    train and test scene pools are disjoint and each target image identifies
    exactly one record.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {img_dir}: {e}") from e
    taken, written = set(), set()
    train = _split_records(seed, n_train, queries_per_scene, taken, px, img_dir, 0, written)
    test = _split_records(seed, n_test, queries_per_scene, taken, px, img_dir, 1, written)
    for name, recs in (("train", train), ("test", test)):
        (out / f"{name}.jsonl").write_text("".join(r.to_json() + "\n" for r in recs), encoding="utf-8")
    (out / "captions.txt").write_text("".join(r.caption + "\n" for r in train + test), encoding="utf-8")
    vocab = Vocabulary.build(r.caption for r in train)
    vocab.save(out / "vocab.txt")
    # paths relative to out_dir keep the tree byte-identical wherever it is written
    manifest = {"train": "train.jsonl", "test": "test.jsonl", "vocab": "vocab.txt", "n_train": len(train), "n_test": len(test),
                "images": len(written), "px": px, "seed": seed}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> list:
    """Read a JSON-lines triplet manifest; image paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = TripletRecord(str(base / d["query"]), d["caption"], str(base / d["target"]), d.get("category"))
        except (json.JSONDecodeError, KeyError) as e:
            raise ValueError(f"{path}:{lineno}: bad manifest line ({e})") from e
        records.append(rec)
    return records


class TripletDataset:
    """Records plus an in-memory image cache."""

    def __init__(self, records: Sequence[TripletRecord]):
        self.records = list(records)
        self._cache: dict = {}

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_manifest(cls, path) -> "TripletDataset":
        return cls(load_manifest(path))

    def image(self, path: str) -> np.ndarray:
        img = self._cache.get(path)
        if img is None:
            try:
                img = read_image(path)
            except FileNotFoundError as e:
                raise FileNotFoundError(f"missing image {path}") from e
            self._cache[path] = img
        return img

    def images(self, paths: Iterable[str]) -> np.ndarray:
        return np.stack([self.image(p) for p in paths])

    def categories(self) -> list:
        return sorted({r.category for r in self.records if r.category is not None})


def catalog_paths(*datasets: TripletDataset) -> list:
    """Sorted unique target image paths; list position is the catalog id."""
    return sorted({r.target for ds in datasets for r in ds.records})
