"""In-memory image datasets, class-wise partitioning and batch iteration."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


class BadMagicError(IDXError):
    pass


class TruncatedFileError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: tuple[int, ...]
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.classes = tuple(int(c) for c in self.classes)
        if len(self.labels) and not np.isin(self.labels, self.classes).all():
            raise DataError("dataset contains labels outside its class set")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: str | None = None, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.classes,
                       split or self.split, name or self.name)


@dataclass
class PartitionPair:
    first: Dataset
    second: Dataset
    classes_first: tuple[int, ...]
    classes_second: tuple[int, ...]
    remap_first: dict[int, int] = field(default_factory=dict)
    remap_second: dict[int, int] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.first, self.second))


def _remap(d: Dataset, classes: tuple[int, ...], tag: str) -> tuple[Dataset, dict[int, int]]:
    table = {c: i for i, c in enumerate(sorted(classes))}
    idx = np.flatnonzero(np.isin(d.labels, classes))
    lookup = np.vectorize(table.__getitem__, otypes=[np.int64])
    labels = lookup(d.labels[idx]) if len(idx) else np.zeros(0, dtype=np.int64)
    return Dataset(d.images[idx], labels, tuple(range(len(classes))), d.split, f"{d.name}/{tag}"), table


def split_classes(classes, seed: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    classes = list(classes)
    if len(classes) < 2:
        raise ConfigError(f"class partitioning needs at least 2 classes, got {len(classes)}")
    order = np.random.default_rng(seed).permutation(len(classes))
    shuffled = [classes[i] for i in order]
    cut = math.ceil(len(classes) / 2)
    return tuple(sorted(shuffled[:cut])), tuple(sorted(shuffled[cut:]))


def partition_by_class(d: Dataset, seed: int) -> PartitionPair:
    """Split ``d`` into two datasets over disjoint, seeded-random class halves.

    Labels in each half are renumbered 0..k-1 in ascending order of the
    original class id.
    """
    first_cls, second_cls = split_classes(d.classes, seed)
    first, t1 = _remap(d, first_cls, "part1")
    second, t2 = _remap(d, second_cls, "part2")
    return PartitionPair(first, second, first_cls, second_cls, t1, t2)


def partition_with_classes(d: Dataset, first_cls, second_cls) -> PartitionPair:
    first, t1 = _remap(d, tuple(first_cls), "part1")
    second, t2 = _remap(d, tuple(second_cls), "part2")
    return PartitionPair(first, second, tuple(first_cls), tuple(second_cls), t1, t2)


def validation_split(d: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a seeded random ``fraction`` of ``d`` off as a validation set."""
    if not 0 <= fraction < 1:
        raise ConfigError(f"validation fraction must be in [0, 1), got {fraction}")
    n_val = int(round(fraction * len(d)))
    if n_val == 0:
        return d, d.subset(np.zeros(0, dtype=np.int64), split="val")
    order = np.random.default_rng(seed).permutation(len(d))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return d.subset(train_idx), d.subset(val_idx, split="val")


def batches(d: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(d))
    for start in range(0, len(d), batch_size):
        idx = order[start:start + batch_size]
        yield d.images[idx], d.labels[idx]


def synthetic_blobs(num_classes: int, per_class: int, shape=(1, 16, 16), seed: int = 0,
                    separation: float = 3.0, sigma: float = 1.0, pattern_size: int = 4,
                    test_fraction: float = 0.2, name: str = "blobs") -> tuple[Dataset, Dataset]:
    """Gaussian class clusters rendered as images; returns ``(train, test)``.

    Each class mean is a random ``pattern_size`` x ``pattern_size`` tile
    repeated across the ``shape`` canvas (a periodic texture, so the class
    signal survives translation and resizing) and scaled to a per-pixel RMS amplitude of
    ``separation * sigma``; samples add i.i.d. ``N(0, sigma^2)`` pixel noise.
    The whole set is then mapped affinely onto [0, 1]. Every class is split
    ``1 - test_fraction`` / ``test_fraction`` between train and test.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    C, H, W = shape
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((num_classes, C, pattern_size, pattern_size))
    rows = np.arange(H) % pattern_size
    cols = np.arange(W) % pattern_size
    means = coarse[:, :, rows][:, :, :, cols]
    norms = np.sqrt((means ** 2).mean(axis=(1, 2, 3), keepdims=True))
    means = means / norms * (separation * sigma)

    labels = np.repeat(np.arange(num_classes), per_class)
    images = means[labels] + sigma * rng.standard_normal((len(labels), C, H, W))
    lo, hi = images.min(), images.max()
    images = ((images - lo) / (hi - lo)).astype(np.float32)

    n_test = int(round(test_fraction * per_class))
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        test_mask[rng.choice(members, size=n_test, replace=False)] = True
    classes = tuple(range(num_classes))
    train = Dataset(images[~test_mask], labels[~test_mask], classes, "train", name)
    test = Dataset(images[test_mask], labels[test_mask], classes, "test", name)
    return train, test


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise TruncatedFileError(f"truncated IDX file while reading {what}: need {offset + n} bytes, have {len(buf)}")
    return buf[offset:offset + n]


def parse_idx_images(buf: bytes) -> np.ndarray:
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "magic"))
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"bad IDX image magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}")
    n, rows, cols = struct.unpack(">III", _read_exact(buf, 4, 12, "image header"))
    pixels = _read_exact(buf, 16, n * rows * cols, "image data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "magic"))
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"bad IDX label magic 0x{magic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}")
    (n,) = struct.unpack(">I", _read_exact(buf, 4, 4, "label header"))
    return np.frombuffer(_read_exact(buf, 8, n, "label data"), dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path, split: str = "train", name: str | None = None) -> Dataset:
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images in {images_path} but {len(labels)} labels in {labels_path}")
    classes = tuple(int(c) for c in np.unique(labels))
    return Dataset(images.astype(np.float32) / 255.0, labels, classes, split, name or Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 ``images`` (N,H,W) and ``labels`` (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
