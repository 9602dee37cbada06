"""Images, labeled datasets, image I/O and the synthetic "signs" generator.

Images are float64 arrays of shape (H, W, 3), channel-last, values in [0, 1].
All randomness is driven by explicit seeds.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MIN_SIZE = 16
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".ppm")


class DataError(ValueError):
    """Invalid dataset spec, unreadable file or malformed directory."""


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < MIN_SIZE or image.shape[1] < MIN_SIZE:
        raise DataError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    return image


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Immutable collection of equally sized images with integer labels.

    ``splits`` optionally tags every item ``"train"`` or ``"test"``.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple
    splits: np.ndarray | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[0] == 0 or images.shape[3] != 3:
            raise DataError(f"dataset images must be a non-empty (N, H, W, 3) array, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DataError("one label per image required")
        n_classes = len(self.class_names)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise DataError("labels must lie in [0, n_classes)")
        if images.min() < 0.0 or images.max() > 1.0:
            raise DataError("image values must lie in [0, 1]")
        object.__setattr__(self, "images", _freeze(images))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        if self.splits is not None:
            splits = np.asarray(self.splits, dtype=object)
            if splits.shape != labels.shape or not set(splits) <= {"train", "test"}:
                raise DataError("splits must tag each item 'train' or 'test'")
            object.__setattr__(self, "splits", _freeze(splits))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        splits = None if self.splits is None else self.splits[indices]
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_names, splits)

    def split(self, name: str) -> "LabeledDataset":
        if self.splits is None:
            raise DataError("dataset carries no split information")
        idx = np.flatnonzero(self.splits == name)
        if idx.size == 0:
            raise DataError(f"split {name!r} is empty")
        return self.subset(idx)

    def subsample(self, n: int, seed: int) -> "LabeledDataset":
        """Seeded subset of ``n`` items, kept in original order."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    size: int = 64
    clutter: float = 0.5
    fine_grained: bool = False
    seed: int = 0
    n_per_class: int = 40
    test_fraction: float = 0.25
    object_scale: float = 0.34  # object radius as a fraction of the image side

    def validate(self):
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")
        if self.size < MIN_SIZE:
            raise DataError(f"size must be >= {MIN_SIZE}")
        if not 0.0 <= self.clutter <= 1.0:
            raise DataError("clutter must lie in [0, 1]")
        if self.n_per_class < 1:
            raise DataError("n_per_class must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DataError("test_fraction must lie in [0, 1)")
        if not 0.1 <= self.object_scale <= 0.45:
            raise DataError("object_scale must lie in [0.1, 0.45]")
        if self.fine_grained and self.n_classes > len(_glyph_bank()):
            raise DataError(f"fine-grained datasets support at most {len(_glyph_bank())} classes")
        if not self.fine_grained and self.n_classes > len(SHAPES) * len(COLORS):
            raise DataError(f"at most {len(SHAPES) * len(COLORS)} classes supported")


SHAPES = ("disc", "square", "triangle", "diamond", "cross", "ring", "hexagon", "star")
COLORS = (
    (0.85, 0.12, 0.10),
    (0.10, 0.25, 0.85),
    (0.15, 0.70, 0.20),
    (0.95, 0.85, 0.10),
    (0.55, 0.20, 0.70),
    (0.95, 0.50, 0.10),
    (0.10, 0.75, 0.80),
    (0.90, 0.40, 0.60),
)
GLYPH_CELLS = 4
GLYPH_CELL_FRACTION = 1 / 13  # glyph cell side relative to the image side
SIGN_RED = (0.80, 0.10, 0.10)
GLYPH_INK = (0.15, 0.15, 0.15)


def class_identity(c: int) -> tuple:
    """(shape name, RGB colour) of synthetic class ``c``."""
    shape = SHAPES[c % len(SHAPES)]
    color = COLORS[(c + 3 * (c // len(SHAPES))) % len(COLORS)]
    return shape, color


def _glyph_bank() -> list:
    # Fixed glyph set, independent of any dataset seed: 4x4 binary patterns
    # with 6..9 inked cells and pairwise Hamming distance >= 5.
    rng = np.random.default_rng(20240501)
    bank: list = []
    while len(bank) < 16:
        g = rng.random((GLYPH_CELLS, GLYPH_CELLS)) < 0.5
        if not 6 <= g.sum() <= 9:
            continue
        if all(np.sum(g != h) >= 5 for h in bank):
            bank.append(g)
    return bank


_GLYPHS = _glyph_bank()


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _regular_polygon(yy, xx, cy, cx, r, n, rot):
    ang = np.arctan2(yy - cy, xx - cx) - rot
    dist = np.hypot(yy - cy, xx - cx)
    sector = 2 * np.pi / n
    a = np.mod(ang, sector) - sector / 2
    apothem = r * np.cos(np.pi / n)
    return dist * np.cos(a) <= apothem


def shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = _grid(size)
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        s = r * 0.85
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if shape == "triangle":
        return _regular_polygon(yy, xx, cy + 0.2 * r, cx, 1.15 * r, 3, -np.pi / 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.1 * r
    if shape == "cross":
        w = 0.35 * r
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "hexagon":
        return _regular_polygon(yy, xx, cy, cx, r, 6, 0.0)
    if shape == "star":
        ang = np.arctan2(dy, dx) + np.pi / 2
        rad = r * (0.62 + 0.38 * np.cos(5 * ang))
        return np.hypot(dy, dx) <= rad
    raise DataError(f"unknown shape {shape!r}")


def _paint(img, mask, color, alpha=1.0):
    img[mask] = (1 - alpha) * img[mask] + alpha * np.asarray(color)


def render_clutter(rng: np.random.Generator, size: int, clutter: float, palette: str = "muted") -> np.ndarray:
    """Object-free background texture.

    ``palette="muted"`` gives the low-contrast clutter used behind objects;
    ``palette="wide"`` adds saturated blobs, stripes and colour noise and is
    used for the occluder training corpus.
    """
    base = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, size=3)
    img = np.empty((size, size, 3))
    img[:] = base
    yy, xx = _grid(size)
    wide = palette == "wide"
    n_items = int(round(clutter * (16 if wide else 10)))
    contrast = 0.6 if wide else 0.25
    for _ in range(n_items):
        kind = rng.integers(0, 5 if wide else 3)
        if wide and rng.random() < 0.4:
            color = rng.random(3)
        else:
            color = np.clip(base + rng.uniform(-contrast, contrast, size=3), 0, 1)
        cy, cx = rng.uniform(0, size, size=2)
        if kind == 0:
            ry, rx = rng.uniform(2, size / 4, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        elif kind == 1:
            hy, hx = rng.uniform(2, size / 4, size=2)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        elif kind == 2:
            theta = rng.uniform(0, np.pi)
            width = rng.uniform(0.7, 2.0)
            d = np.abs((yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta))
            mask = d <= width
        elif kind == 3:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(3, 9)
            phase = (yy * np.cos(theta) + xx * np.sin(theta)) / period
            h = rng.uniform(4, size / 3)
            mask = (np.mod(phase, 1.0) < 0.5) & (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= h)
        else:
            h = int(rng.integers(4, size // 3))
            r0, c0 = int(cy) % (size - h), int(cx) % (size - h)
            img[r0 : r0 + h, c0 : c0 + h] = rng.random((h, h, 3))
            continue
        _paint(img, mask, color, alpha=rng.uniform(0.5, 1.0))
    img += rng.normal(0.0, 0.02 + 0.02 * clutter, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_object(rng: np.random.Generator, img: np.ndarray, label: int, fine_grained: bool,
                  scale: float = 0.34) -> np.ndarray:
    size = img.shape[0]
    jitter = 0.06 * size
    cy, cx = size / 2 + rng.uniform(-jitter, jitter, size=2)
    r = scale * size * rng.uniform(0.92, 1.08)
    if fine_grained:
        disc = shape_mask("disc", size, cy, cx, r)
        inner = shape_mask("disc", size, cy, cx, 0.78 * r)
        _paint(img, disc, np.clip(np.array(SIGN_RED) + rng.uniform(-0.05, 0.05, 3), 0, 1))
        _paint(img, inner, np.clip(0.92 + rng.uniform(-0.05, 0.05, 3), 0, 1))
        cell = glyph_cell(size)
        g = _GLYPHS[label]
        top = int(round(cy - GLYPH_CELLS * cell / 2))
        left = int(round(cx - GLYPH_CELLS * cell / 2))
        for (i, j) in zip(*np.nonzero(g)):
            img[top + i * cell : top + (i + 1) * cell, left + j * cell : left + (j + 1) * cell] = GLYPH_INK
    else:
        shape, color = class_identity(label)
        mask = shape_mask(shape, size, cy, cx, r)
        color = np.clip(np.array(color) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        _paint(img, mask, color)
    return img


def glyph_cell(size: int) -> int:
    """Side in pixels of one glyph cell."""
    return max(1, int(round(size * GLYPH_CELL_FRACTION)))


def glyph_area_fraction(size: int) -> float:
    cell = glyph_cell(size)
    return (GLYPH_CELLS * cell) ** 2 / size**2


def generate_synthetic_dataset(spec: SyntheticSpec) -> LabeledDataset:
    """Render ``spec.n_per_class`` images per class with a train/test split.

    The first ``round((1 - test_fraction) * n_per_class)`` items of every class
    are tagged ``"train"``, the rest ``"test"``.
    """
    spec.validate()
    if spec.fine_grained and glyph_area_fraction(spec.size) > 0.15:
        raise DataError("glyph region exceeds 15% of the image")
    n_test = int(round(spec.test_fraction * spec.n_per_class))
    images, labels, splits = [], [], []
    for c in range(spec.n_classes):
        for j in range(spec.n_per_class):
            rng = np.random.default_rng([spec.seed, c, j])
            img = render_clutter(rng, spec.size, spec.clutter)
            images.append(render_object(rng, img, c, spec.fine_grained, spec.object_scale))
            labels.append(c)
            splits.append("test" if j >= spec.n_per_class - n_test else "train")
    if spec.fine_grained:
        names = [f"glyph{c}" for c in range(spec.n_classes)]
    else:
        names = [f"{class_identity(c)[0]}{c}" for c in range(spec.n_classes)]
    return LabeledDataset(np.stack(images), np.array(labels), tuple(names), np.array(splits, dtype=object))


def background_corpus(spec: SyntheticSpec, n: int, seed: int) -> list:
    """``n`` object-free images with a wider texture palette than the dataset backgrounds."""
    return [
        render_clutter(np.random.default_rng([seed, 0xB6, i]), spec.size, max(spec.clutter, 0.5), palette="wide")
        for i in range(n)
    ]


def resize(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize to ``target x target`` using pixel-centre alignment."""
    if target < MIN_SIZE:
        raise DataError(f"target must be >= {MIN_SIZE}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (target, target):
        return np.clip(image.copy(), 0.0, 1.0)

    def coords(n_in):
        x = (np.arange(target) + 0.5) * n_in / target - 0.5
        x = np.clip(x, 0, n_in - 1)
        x0 = np.floor(x).astype(int)
        x1 = np.minimum(x0 + 1, n_in - 1)
        return x0, x1, x - x0

    y0, y1, wy = coords(h)
    x0, x1, wx = coords(w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return np.clip(top * (1 - wy) + bottom * wy, 0.0, 1.0)


# -- image and dataset I/O ---------------------------------------------------


def save_image(path, image: np.ndarray):
    arr = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    PILImage.fromarray(arr, mode="RGB").save(path, format=fmt)


def load_image(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return check_image(arr)


def load_image_folder(path, size: int | None = None) -> LabeledDataset:
    """One sub-directory per class; labels follow sorted directory names."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} contains no class directories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory {d} contains no images")
        for f in files:
            img = load_image(f)
            if size is not None:
                img = resize(img, size)
            images.append(img)
            labels.append(label)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images differ in size {sorted(shapes)}; pass size= to resize")
    return LabeledDataset(np.stack(images), np.array(labels), tuple(d.name for d in class_dirs))


def load_images(paths) -> list:
    return [load_image(p) for p in paths]


def write_dataset(dataset: LabeledDataset, out_dir, spec: SyntheticSpec | None = None,
                  background: list | None = None) -> Path:
    """Write PNGs plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(len(dataset)):
        split = dataset.splits[i] if dataset.splits is not None else "train"
        rel = Path(split) / f"{i:05d}_{dataset.labels[i]}.png"
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        save_image(out / rel, dataset.images[i])
        items.append({"path": rel.as_posix(), "label": int(dataset.labels[i]), "split": split})
    bg_items = []
    for i, img in enumerate(background or []):
        rel = Path("background") / f"{i:05d}.png"
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        save_image(out / rel, img)
        bg_items.append(rel.as_posix())
    manifest = {
        "version": MANIFEST_VERSION,
        "class_names": list(dataset.class_names),
        "items": items,
        "background": bg_items,
        "spec": asdict(spec) if spec is not None else None,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def load_manifest(path) -> tuple:
    """Load a dataset written by :func:`write_dataset`.

    Returns ``(dataset, background_images)``.
    """
    mpath = _manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {mpath}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')!r}")
    root = mpath.parent
    items = manifest["items"]
    if not items:
        raise DataError("manifest lists no items")
    images = [load_image(root / it["path"]) for it in items]
    labels = [it["label"] for it in items]
    splits = [it.get("split", "train") for it in items]
    dataset = LabeledDataset(np.stack(images), np.array(labels), tuple(manifest["class_names"]),
                             np.array(splits, dtype=object))
    background = [load_image(root / p) for p in manifest.get("background", [])]
    return dataset, background


def load_dataset(path, size: int | None = None) -> tuple:
    """Manifest directory/file or plain class-folder tree; returns ``(dataset, background)``."""
    if _manifest_path(path).is_file():
        return load_manifest(path)
    return load_image_folder(path, size=size), []


def env_threads(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("COMPDEF_THREADS", default)))
    except ValueError:
        return default
