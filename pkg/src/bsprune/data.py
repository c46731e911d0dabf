"""Datasets: MNIST IDX files and a calibrated synthetic generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, c), float32, zero-centered per image
    labels: np.ndarray  # (n,), int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, h, w, c), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def as_tuple(self):
        return self.images, self.labels


def zero_center(images):
    """Subtract each image's mean intensity."""
    images = np.asarray(images, dtype=np.float32)
    return images - images.mean(axis=(1, 2, 3), keepdims=True)


def upsample(images, factor):
    """Nearest-neighbour upsampling by an integer factor."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return images
    return images.repeat(factor, axis=1).repeat(factor, axis=2)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, upsample_factor=1, num_classes=10, split="train"):
    """Parse an IDX image/label file pair (optionally gzip-compressed)."""
    images = _parse_idx(_read(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32)[..., None] / 255.0
    x = upsample(zero_center(x), upsample_factor)
    return Dataset(x, labels.astype(np.int64), num_classes, split)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (used to build test fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def synth_dataset(n, h=16, w=16, c=1, num_classes=2, seed=0, noise=1.0, amplitude=1.0, split="train"):
    """Class-conditional Gaussian-blob images.

    Each class owns a fixed blob position; a sample is that blob (with a
    small random jitter in position and width) plus white noise. Labels are
    balanced to within one per class.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    # class centres on a ring around the image centre
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = 0.25 * min(h, w)
    cy = (h - 1) / 2 + radius * np.sin(angles)
    cx = (w - 1) / 2 + radius * np.cos(angles)
    sigma = 0.12 * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    jitter = rng.normal(0.0, 0.05 * min(h, w), size=(n, 2))
    width = sigma * rng.uniform(0.8, 1.2, size=n)
    py = cy[labels] + jitter[:, 0]
    px = cx[labels] + jitter[:, 1]
    d2 = (yy[None] - py[:, None, None]) ** 2 + (xx[None] - px[:, None, None]) ** 2
    blobs = amplitude * np.exp(-d2 / (2 * width[:, None, None] ** 2))
    images = blobs[..., None] + noise * rng.normal(0.0, 0.5, size=(n, h, w, c))
    return Dataset(zero_center(images), labels, num_classes, split)


def train_val_split(ds, val_fraction=0.1, seed=0):
    """Seeded 90/10 split of a training set."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    return ds.subset(np.sort(order[n_val:]), "train"), ds.subset(np.sort(order[:n_val]), "val")


def augment(images, rng, shift=0.15, flip=True):
    """Random translation up to ``shift`` of the extent (zero fill) and horizontal flips."""
    n, h, w, _ = images.shape
    out = np.zeros_like(images)
    dy = rng.integers(-int(shift * h), int(shift * h) + 1, size=n)
    dx = rng.integers(-int(shift * w), int(shift * w) + 1, size=n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        img = images[i, :, ::-1] if flips[i] else images[i]
        ys, yd = (slice(0, h - dy[i]), slice(dy[i], h)) if dy[i] >= 0 else (slice(-dy[i], h), slice(0, h + dy[i]))
        xs, xd = (slice(0, w - dx[i]), slice(dx[i], w)) if dx[i] >= 0 else (slice(-dx[i], w), slice(0, w + dx[i]))
        out[i, yd, xd] = img[ys, xs]
    return out
