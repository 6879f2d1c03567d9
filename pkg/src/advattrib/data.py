"""Clean classification data: procedural shape images and IDX file I/O.

Synthetic images are quantised to 8-bit levels, like IDX/MNIST pixels, so a
split written with :func:`write_idx_split` reads back bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConsistencyError, FormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# standard MNIST file names; gen-data writes the same names
IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    label: int


@dataclass
class DatasetSplit:
    """Train/test images as (N, C, H, W) float64 arrays in [0, 1] plus int labels."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    seed: int = 0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        ref = self.train_x if len(self.train_x) else self.test_x
        return tuple(ref.shape[1:])

    @property
    def train(self) -> list[LabeledImage]:
        return list(_records(self.train_x, self.train_y))

    @property
    def test(self) -> list[LabeledImage]:
        return list(_records(self.test_x, self.test_y))


def _records(x: np.ndarray, y: np.ndarray) -> Iterator[LabeledImage]:
    for img, lab in zip(x, y):
        yield LabeledImage(img, int(lab))


# ---------------------------------------------------------------------------
# Procedural shapes
# ---------------------------------------------------------------------------

NOISE = 0.06  # additive pixel noise std before 8-bit quantisation
CLUTTER_PROB = 0.5
SHAPE_FAMILIES = (
    "hbar", "vbar", "disk", "cross", "ring", "diagonal", "square", "xmark", "dots", "corner",
)


def _draw(family: str, side: int, rng: np.random.Generator, noise: float = NOISE) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    jitter = side / 8.0
    cy = c + rng.uniform(-jitter, jitter)
    cx = c + rng.uniform(-jitter, jitter)
    thick = rng.uniform(0.08, 0.16) * side
    extent = rng.uniform(0.28, 0.4) * side
    if family == "hbar":
        m = (np.abs(yy - cy) <= thick / 2) & (np.abs(xx - cx) <= extent)
    elif family == "vbar":
        m = (np.abs(xx - cx) <= thick / 2) & (np.abs(yy - cy) <= extent)
    elif family == "disk":
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.75 * extent) ** 2
    elif family == "cross":
        m = ((np.abs(yy - cy) <= thick / 2) & (np.abs(xx - cx) <= extent)) | (
            (np.abs(xx - cx) <= thick / 2) & (np.abs(yy - cy) <= extent)
        )
    elif family == "ring":
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        m = np.abs(r - 0.8 * extent) <= thick / 2
    elif family == "diagonal":
        m = (np.abs((yy - cy) - (xx - cx)) <= thick / 1.4) & (np.abs(xx - cx) <= extent)
    elif family == "square":
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        m = np.abs(d - 0.8 * extent) <= thick / 2
    elif family == "xmark":
        m = ((np.abs((yy - cy) - (xx - cx)) <= thick / 1.4) | (np.abs((yy - cy) + (xx - cx)) <= thick / 1.4)) & (
            np.abs(xx - cx) <= extent
        )
    elif family == "dots":
        off = 0.6 * extent
        r2 = (0.35 * extent) ** 2
        m = ((yy - cy) ** 2 + (xx - cx - off) ** 2 <= r2) | ((yy - cy) ** 2 + (xx - cx + off) ** 2 <= r2)
    elif family == "corner":
        m = ((np.abs(yy - cy) <= thick / 2) & (xx >= cx) & (xx - cx <= extent)) | (
            (np.abs(xx - cx) <= thick / 2) & (yy >= cy) & (yy - cy <= extent)
        )
    else:
        raise ValueError(f"unknown shape family {family!r}")
    intensity = rng.uniform(0.5, 1.0)
    img = m * intensity
    if rng.random() < CLUTTER_PROB:
        # class-independent stray stroke; makes a few images genuinely ambiguous
        y0, x0 = rng.uniform(0, side, size=2)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.3, 0.6) * side
        t = (yy - y0) * np.cos(angle) - (xx - x0) * np.sin(angle)
        u = (yy - y0) * np.sin(angle) + (xx - x0) * np.cos(angle)
        stroke = (np.abs(t) <= 0.6) & (np.abs(u) <= length / 2)
        img = np.maximum(img, stroke * rng.uniform(0.4, 0.9))
    img = img + rng.normal(0.0, noise, size=(side, side))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _generate(num_classes: int, per_class: int, side: int, rng: np.random.Generator, noise: float):
    xs = np.empty((num_classes * per_class, 1, side, side))
    ys = np.repeat(np.arange(num_classes), per_class)
    for i, label in enumerate(ys):
        xs[i, 0] = _draw(SHAPE_FAMILIES[label], side, rng, noise)
    order = rng.permutation(len(ys))
    return xs[order], ys[order]


def generate_synthetic(num_classes: int, per_class: int, side: int = 16, seed: int = 0,
                       test_per_class: int | None = None, noise: float = NOISE) -> DatasetSplit:
    """Deterministic grayscale shape dataset; one procedural family per class.

    ``per_class`` train images per class; ``test_per_class`` defaults to a
    quarter of that (at least one). Train and test come from independent
    child streams of ``seed``.
    """
    if not 2 <= num_classes <= len(SHAPE_FAMILIES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPE_FAMILIES)}], got {num_classes}")
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    if test_per_class is None:
        test_per_class = max(1, per_class // 4)
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    tx, ty = _generate(num_classes, per_class, side, np.random.default_rng(train_ss), noise)
    vx, vy = _generate(num_classes, test_per_class, side, np.random.default_rng(test_ss), noise)
    return DatasetSplit(tx, ty, vx, vy, num_classes, seed)


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------


def _read_header(blob: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: file too short for an IDX header ({len(blob)} bytes)")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", blob[4:need])


def read_idx_images(path) -> np.ndarray:
    """(N, 1, H, W) float64 array rescaled from u8 to [0, 1]."""
    blob = Path(path).read_bytes()
    n, h, w = _read_header(blob, path, IDX_IMAGES_MAGIC, 3)
    payload = blob[16:]
    if len(payload) < n * h * w:
        raise TruncatedFileError(f"{path}: expected {n * h * w} pixel bytes, found {len(payload)}")
    if len(payload) > n * h * w:
        raise FormatError(f"{path}: {len(payload) - n * h * w} trailing bytes after pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    return arr.astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (n,) = _read_header(blob, path, IDX_LABELS_MAGIC, 1)
    payload = blob[8:]
    if len(payload) < n:
        raise TruncatedFileError(f"{path}: expected {n} labels, found {len(payload)}")
    if len(payload) > n:
        raise FormatError(f"{path}: {len(payload) - n} trailing bytes after labels")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def parse_idx(images_path, labels_path, num_classes: int | None = None) -> DatasetSplit:
    """Read one IDX image/label pair into the train half of a split."""
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if len(x) != len(y):
        raise ConsistencyError(f"{len(x)} images but {len(y)} labels")
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 0
    empty_x = np.empty((0,) + x.shape[1:])
    return DatasetSplit(x, y, empty_x, np.empty(0, dtype=np.int64), num_classes, 0)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise FormatError("IDX image files hold single-channel images")
        images = images[:, 0]
    n, h, w = images.shape
    u8 = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + u8.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def write_idx_split(directory, split: DatasetSplit) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_idx_images(d / IDX_NAMES["train_images"], split.train_x)
    write_idx_labels(d / IDX_NAMES["train_labels"], split.train_y)
    write_idx_images(d / IDX_NAMES["test_images"], split.test_x)
    write_idx_labels(d / IDX_NAMES["test_labels"], split.test_y)


def has_idx_split(directory) -> bool:
    d = Path(directory)
    return all((d / name).exists() for name in IDX_NAMES.values())


def load_idx_split(directory, num_classes: int | None = None, seed: int = 0) -> DatasetSplit:
    """Load the four standard-named IDX files found in ``directory``."""
    d = Path(directory)
    train = parse_idx(d / IDX_NAMES["train_images"], d / IDX_NAMES["train_labels"])
    test = parse_idx(d / IDX_NAMES["test_images"], d / IDX_NAMES["test_labels"])
    if num_classes is None:
        num_classes = max(train.num_classes, test.num_classes)
    return DatasetSplit(train.train_x, train.train_y, test.train_x, test.train_y, num_classes, seed)
