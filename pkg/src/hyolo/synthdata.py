"""Synthetic hierarchical detection data.

Leaf classes are combinations of visual attributes taken in a fixed order,
shape first, so the coarsest level is the easiest to tell apart.  A scene is
a noisy gray canvas with several objects placed largest-first; an object is
kept only if no object (itself included) ends up with more than
``occlusion_cap`` of its own pixels hidden.

On disk a dataset looks like::

    images/{train,val,test}/00000.ppm
    labels/{train,val,test}/00000.txt     c0 ... c{L-1} cx cy w h
    taxonomy.txt
    gen-config.txt
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import check, from_mapping, to_text
from .errors import (BoxOutOfRange, CanvasTooSmall, DatasetEmpty, DataError, MalformedLine,
                     InvalidPath)
from .taxonomy import ROOT, Taxonomy, build_taxonomy, load_taxonomy

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

ATTRIBUTE_VALUES: dict[str, tuple[str, ...]] = {
    "shape": ("disc", "square", "triangle"),
    "size": ("small", "large"),
    "color": ("red", "green", "blue"),
    "pattern": ("solid", "striped"),
    "border": ("plain", "ringed"),
}

COLORS = {"red": (205, 55, 50), "green": (55, 165, 70), "blue": (50, 85, 210)}
BACKGROUND = 128.0
BACKGROUND_NOISE = 10.0
HUE_JITTER = 15


@dataclass(frozen=True)
class SynthTaxonomySpec:
    attributes: tuple[str, ...] = ("shape", "size", "color", "pattern")
    depth: int = 4

    def __post_init__(self):
        unknown = [a for a in self.attributes if a not in ATTRIBUTE_VALUES]
        check(not unknown, "attributes", f"unknown attribute(s) {unknown}; known: {list(ATTRIBUTE_VALUES)}")
        check(len(set(self.attributes)) == len(self.attributes), "attributes", "attributes repeat")
        check(self.attributes[:1] == ("shape",), "attributes", "the first attribute must be shape")
        check(1 <= self.depth <= len(self.attributes), "depth",
              f"must be in [1, {len(self.attributes)}], got {self.depth}")

    @property
    def used(self) -> tuple[str, ...]:
        return self.attributes[: self.depth]

    def leaf_count(self) -> int:
        return int(np.prod([len(ATTRIBUTE_VALUES[a]) for a in self.used]))

    def taxonomy(self) -> Taxonomy:
        """Nodes are named by their attribute path, e.g. ``disc_small_red``."""
        edges = []
        frontier = [(ROOT, ())]
        for attr in self.used:
            nxt = []
            for parent, values in frontier:
                for v in ATTRIBUTE_VALUES[attr]:
                    path = values + (v,)
                    name = "_".join(path)
                    edges.append((parent, name))
                    nxt.append((name, path))
            frontier = nxt
        return build_taxonomy(edges, depth=self.depth)


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    objects: int = 18
    occlusion_cap: float = 0.70
    retries: int = 10

    def __post_init__(self):
        check(self.canvas >= 16, "canvas", f"must be >= 16, got {self.canvas}")
        check(self.objects >= 1, "objects", f"must be >= 1, got {self.objects}")
        check(0.0 <= self.occlusion_cap <= 1.0, "occlusion_cap", f"must be in [0, 1], got {self.occlusion_cap}")
        check(self.retries >= 1, "retries", f"must be >= 1, got {self.retries}")


@dataclass(frozen=True)
class GenConfig:
    """Everything ``generate_dataset`` needs; round-trips through ``gen-config.txt``."""

    depth: int = 3
    attributes: tuple[str, ...] = ("shape", "size", "color", "pattern")
    canvas: int = 64
    objects: int = 4
    occlusion_cap: float = 0.70
    retries: int = 10
    train: int = 200
    val: int = 50
    test: int = 50
    seed: int = 0

    def __post_init__(self):
        for key in SPLITS:
            check(getattr(self, key) >= 1, key, f"must be >= 1, got {getattr(self, key)}")
        self.taxonomy_spec()
        self.scene_spec()

    def taxonomy_spec(self) -> SynthTaxonomySpec:
        return SynthTaxonomySpec(tuple(self.attributes), self.depth)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(self.canvas, self.objects, self.occlusion_cap, self.retries)

    def counts(self) -> dict[str, int]:
        return {s: getattr(self, s) for s in SPLITS}


@dataclass(frozen=True)
class HierLabel:
    classes: tuple[int, ...]
    box: tuple[float, float, float, float]


# -- rendering --------------------------------------------------------------

@dataclass(frozen=True)
class Item:
    """One object to place: its leaf path plus resolved appearance."""

    path: tuple[int, ...]
    shape: str
    radius: int
    color: tuple[int, int, int]
    pattern: str
    border: str


def _radius_range(size: str | None, canvas: int) -> tuple[int, int]:
    scale = canvas / 64.0
    small = (max(2, round(4 * scale)), max(3, round(6 * scale)))
    large = (max(4, round(8 * scale)), max(5, round(11 * scale)))
    if size == "small":
        return small
    if size == "large":
        return large
    return small[0], large[1]


def make_item(leaf_values: dict[str, str], path: tuple[int, ...], canvas: int,
              rng: np.random.Generator) -> Item:
    """Resolve attributes missing from the taxonomy at random."""
    def pick(attr):
        return leaf_values.get(attr) or ATTRIBUTE_VALUES[attr][rng.integers(len(ATTRIBUTE_VALUES[attr]))]

    shape = pick("shape")
    lo, hi = _radius_range(leaf_values.get("size"), canvas)
    radius = int(rng.integers(lo, hi + 1))
    base = np.array(COLORS[pick("color")])
    color = tuple(int(c) for c in np.clip(base + rng.integers(-HUE_JITTER, HUE_JITTER + 1, 3), 0, 255))
    return Item(path, shape, radius, color, pick("pattern"), pick("border"))


def shape_mask(shape: str, radius: int) -> np.ndarray:
    """Boolean footprint of side ``2 * radius + 1`` centred on the middle pixel."""
    r = radius
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    if shape == "disc":
        m = xx * xx + yy * yy <= r * r + r
    elif shape == "square":
        m = np.ones_like(xx, dtype=bool)
    elif shape == "triangle":
        m = 2 * np.abs(xx) <= (yy + r)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _object_pixels(item: Item) -> np.ndarray:
    """RGB values for the footprint of ``item`` (pattern and border applied)."""
    m = shape_mask(item.shape, item.radius)
    side = m.shape[0]
    rgb = np.empty((side, side, 3))
    rgb[:] = item.color
    yy, xx = np.mgrid[0:side, 0:side]
    if item.pattern == "striped":
        rgb[((xx + yy) // 2) % 2 == 0] *= 0.45
    if item.border == "ringed":
        inner = np.zeros_like(m)
        inner[1:-1, 1:-1] = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
        rgb[m & ~inner] = 240.0
    return rgb


@dataclass
class Placement:
    item: Item
    x0: int
    y0: int
    mask: np.ndarray        # full-canvas boolean footprint

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def box(self, canvas: int) -> tuple[float, float, float, float]:
        ys, xs = np.nonzero(self.mask)
        x1, x2, y1, y2 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
        return ((x1 + x2) / 2 / canvas, (y1 + y2) / 2 / canvas, (x2 - x1) / canvas, (y2 - y1) / canvas)


def occlusions(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Fraction of each mask hidden by masks listed after it (later = on top)."""
    if not masks:
        return np.zeros(0)
    top = np.full(masks[0].shape, -1)
    for i, m in enumerate(masks):
        top[m] = i
    return np.array([1.0 - np.count_nonzero(top[m] == i) / m.sum() for i, m in enumerate(masks)])


@dataclass
class Scene:
    image: np.ndarray                       # (H, W, 3) uint8
    placements: list[Placement]
    labels: list[HierLabel]
    dropped: int = 0

    def occlusion(self) -> np.ndarray:
        return occlusions([p.mask for p in self.placements])


def compose_scene(spec: SceneSpec, items: Sequence[Item], rng: np.random.Generator) -> Scene:
    """Place ``items`` largest-first, rejecting placements that break the occlusion cap.

    Each item gets ``spec.retries`` random positions; if none works it is
    dropped.  The image is rendered with later objects on top.
    """
    n = spec.canvas
    order = sorted(items, key=lambda it: -int(shape_mask(it.shape, it.radius).sum()))
    placed: list[Placement] = []
    top = np.full((n, n), -1)
    areas: list[int] = []
    dropped = 0
    for item in order:
        local = shape_mask(item.shape, item.radius)
        side = local.shape[0]
        if side > n:
            raise CanvasTooSmall(f"object of side {side} does not fit a {n}px canvas")
        ok = False
        for _ in range(spec.retries):
            x0, y0 = (int(v) for v in rng.integers(0, n - side + 1, 2))
            mask = np.zeros((n, n), dtype=bool)
            mask[y0 : y0 + side, x0 : x0 + side] = local
            cand = np.where(mask, len(placed), top)
            visible = np.bincount(cand[cand >= 0].ravel(), minlength=len(placed) + 1)
            own = areas + [int(local.sum())]
            if all(1.0 - visible[i] / a <= spec.occlusion_cap for i, a in enumerate(own)):
                ok = True
                break
        if not ok:
            dropped += 1
            log.debug("dropped item %s after %d tries", item.path, spec.retries)
            continue
        placed.append(Placement(item, x0, y0, mask))
        areas.append(int(local.sum()))
        top = cand

    img = BACKGROUND + BACKGROUND_NOISE * rng.standard_normal((n, n, 3))
    for p in placed:
        side = p.item.radius * 2 + 1
        local = shape_mask(p.item.shape, p.item.radius)
        region = img[p.y0 : p.y0 + side, p.x0 : p.x0 + side]
        region[local] = _object_pixels(p.item)[local]
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    labels = [HierLabel(p.item.path, _round_box(p.box(n))) for p in placed]
    return Scene(image, placed, labels, dropped)


def _round_box(box) -> tuple[float, float, float, float]:
    return tuple(round(float(v), 6) for v in box)


# -- dataset generation -----------------------------------------------------

def _leaf_values(spec: SynthTaxonomySpec, tax: Taxonomy) -> list[tuple[tuple[int, ...], dict[str, str]]]:
    out = []
    for leaf in tax.leaves:
        values = dict(zip(spec.used, leaf.split("_")))
        out.append((tax.leaf_path(leaf), values))
    return out


def _check_capacity(cfg: GenConfig) -> None:
    scene = cfg.scene_spec()
    lo, hi = _radius_range(None, scene.canvas)
    side = 2 * hi + 1
    if side > scene.canvas:
        raise CanvasTooSmall(f"largest object side {side} exceeds the {scene.canvas}px canvas")
    smallest = (2 * lo + 1) ** 2 * 0.5
    if scene.objects * smallest * (1.0 - scene.occlusion_cap) > scene.canvas ** 2:
        raise CanvasTooSmall(
            f"{scene.objects} objects cannot stay within occlusion cap {scene.occlusion_cap} "
            f"on a {scene.canvas}px canvas")


def generate_scenes(cfg: GenConfig, split: str) -> list[Scene]:
    """All scenes of one split, in index order.

    Leaves are dealt from a reshuffled deck so every leaf appears equally
    often before drops; each scene then uses its own derived seed.
    """
    tspec = cfg.taxonomy_spec()
    tax = tspec.taxonomy()
    leaves = _leaf_values(tspec, tax)
    split_id = SPLITS.index(split)
    deck_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_id]))
    deck: list[int] = []
    scenes = []
    for idx in range(cfg.counts()[split]):
        chosen = []
        for _ in range(cfg.objects):
            if not deck:
                deck = list(deck_rng.permutation(len(leaves)))
            chosen.append(leaves[deck.pop()])
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_id, idx]))
        items = [make_item(values, path, cfg.canvas, rng) for path, values in chosen]
        scenes.append(compose_scene(cfg.scene_spec(), items, rng))
    return scenes


def generate_dataset(cfg: GenConfig, out_dir) -> Path:
    """Write a full dataset to ``out_dir`` and return its path."""
    _check_capacity(cfg)
    out = Path(out_dir)
    tax = cfg.taxonomy_spec().taxonomy()
    out.mkdir(parents=True, exist_ok=True)
    (out / "taxonomy.txt").write_text(tax.serialize())
    (out / "gen-config.txt").write_text(to_text(cfg))
    for split in SPLITS:
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
        (out / "labels" / split).mkdir(parents=True, exist_ok=True)
        for idx, scene in enumerate(generate_scenes(cfg, split)):
            write_ppm(out / "images" / split / f"{idx:05d}.ppm", scene.image)
            write_labels(out / "labels" / split / f"{idx:05d}.txt", scene.labels)
    return out


def leaf_histogram(labels: Sequence[Sequence[HierLabel]], tax: Taxonomy) -> dict[str, int]:
    hist = {leaf: 0 for leaf in tax.leaves}
    for image_labels in labels:
        for lab in image_labels:
            hist[tax.name_at(tax.depth - 1, lab.classes[-1])] += 1
    return hist


# -- file formats -----------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DataError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = data[pos + 1 : pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def format_label(label: HierLabel) -> str:
    return " ".join([str(int(c)) for c in label.classes] + [f"{v:.6f}" for v in label.box])


def write_labels(path, labels: Sequence[HierLabel]) -> None:
    Path(path).write_text("".join(format_label(lab) + "\n" for lab in labels))


BOX_TOL = 1e-6


def parse_label(line: str, tax: Taxonomy, where: str = "") -> HierLabel:
    tok = line.split()
    depth = tax.depth
    if len(tok) != depth + 4:
        raise MalformedLine(f"{where}expected {depth} class indices and 4 box values, got {len(tok)} fields")
    try:
        classes = tuple(int(t) for t in tok[:depth])
        box = tuple(float(t) for t in tok[depth:])
    except ValueError:
        raise MalformedLine(f"{where}non-numeric field in {line.strip()!r}") from None
    for level, c in enumerate(classes):
        if not 0 <= c < len(tax.levels[level]):
            raise InvalidPath(f"{where}level {level}: index {c} out of range [0, {len(tax.levels[level])})")
        if level and not tax.is_child(level, c, classes[level - 1]):
            raise InvalidPath(f"{where}level {level}: class {c} is not a child of class "
                              f"{classes[level - 1]} at level {level - 1}")
    cx, cy, w, h = box
    if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1
            and cx - w / 2 >= -BOX_TOL and cx + w / 2 <= 1 + BOX_TOL
            and cy - h / 2 >= -BOX_TOL and cy + h / 2 <= 1 + BOX_TOL):
        raise BoxOutOfRange(f"{where}box {box} leaves the unit square")
    return HierLabel(classes, box)


def read_labels(path, tax: Taxonomy) -> list[HierLabel]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            out.append(parse_label(line, tax, f"{path}:{lineno}: "))
    return out


# -- loading ----------------------------------------------------------------

@dataclass
class Split:
    name: str
    stems: list[str]
    images: np.ndarray                      # (N, 3, H, W) float64 in [0, 1]
    labels: list[list[HierLabel]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stems)

    def label_pairs(self, idx: Sequence[int]) -> list[list[tuple]]:
        return [[(lab.classes, lab.box) for lab in self.labels[i]] for i in idx]


@dataclass
class Dataset:
    root: Path
    tax: Taxonomy
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def load_split(root, split: str, tax: Taxonomy) -> Split:
    root = Path(root)
    img_dir = root / "images" / split
    if not img_dir.is_dir():
        raise DatasetEmpty(f"{img_dir} does not exist")
    stems = sorted(p.stem for p in img_dir.glob("*.ppm"))
    if not stems:
        raise DatasetEmpty(f"no images in {img_dir}")
    arrays = [read_ppm(img_dir / f"{s}.ppm") for s in stems]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"{img_dir}: images differ in size {sorted(shapes)}")
    images = np.stack(arrays).transpose(0, 3, 1, 2).astype(np.float64) / 255.0
    labels = []
    for s in stems:
        lp = root / "labels" / split / f"{s}.txt"
        labels.append(read_labels(lp, tax) if lp.exists() else [])
    return Split(split, stems, images, labels)


def load_dataset(root, splits: Sequence[str] = SPLITS) -> Dataset:
    root = Path(root)
    tax_path = root / "taxonomy.txt"
    if not tax_path.exists():
        raise DatasetEmpty(f"{tax_path} not found")
    tax = load_taxonomy(tax_path)
    return Dataset(root, tax, {s: load_split(root, s, tax) for s in splits})


def gen_config_from_mapping(values: dict) -> GenConfig:
    return from_mapping(GenConfig, values)
