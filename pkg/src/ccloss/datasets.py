"""Dataset ingestion, synthetic blobs, and deterministic batching.

Binary formats:

* IDX (MNIST): big-endian u32 header fields. Image files carry magic
  0x00000803 then count/rows/cols and a u8 payload, row-major; label files
  carry magic 0x00000801 then count and u8 labels. Gzipped files are
  detected by their two-byte signature and decompressed transparently.
* CIFAR-100 binary: 3074-byte records, each a coarse label byte, a fine
  label byte, then 3072 bytes of 32x32 RGB planes. Fine labels are used.

Datasets are immutable after load. Parsing is total: a byte stream either
yields a complete dataset or raises a typed `DatasetError`; nothing
partial escapes.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor
from .rng import stream_gen

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR100_RECORD = 3074

MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)


class DatasetError(Exception):
    """Base class for ingestion failures."""


class FormatError(DatasetError):
    """A header field (magic, record size, dimensions) is wrong."""


class TruncatedFileError(DatasetError):
    """The payload ends before the header-declared item count."""


class CountMismatchError(DatasetError):
    """Image and label files disagree on the number of items."""


@dataclass(frozen=True)
class LabeledDataset:
    """Images (M, H, W, C), u8 pixels or float features, with integer labels.

    `mean`/`std` are the per-channel normalization constants applied at
    batch time (after /255 for u8 pixels).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    mean: tuple
    std: tuple
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be (M, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError(f"labels outside [0, {self.class_count})")
        if len(self.mean) != self.images.shape[3] or len(self.std) != self.images.shape[3]:
            raise FormatError("normalization constants must be per channel")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices) -> "LabeledDataset":
        return replace(self, images=self.images[indices], labels=self.labels[indices])


@dataclass
class LabeledBatch:
    """Normalized inputs (N, C, H, W) plus their integer labels."""

    inputs: Tensor
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _open_maybe_gzip(path):
    fh = open(path, "rb")
    magic = fh.read(2)
    fh.seek(0)
    if magic == b"\x1f\x8b":
        fh.close()
        return gzip.open(path, "rb")
    return fh


def _read_exact(fh, size: int, what: str, path) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return buf


def parse_idx(images_path, labels_path, expected_classes: Optional[int] = None) -> LabeledDataset:
    """Load an IDX image/label file pair, validating headers and counts."""
    with _open_maybe_gzip(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header", images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: images magic is {magic}, expected {IDX_IMAGE_MAGIC}"
            )
        payload = _read_exact(fh, count * rows * cols, f"{count} images", images_path)
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols, 1).copy()
    with _open_maybe_gzip(labels_path) as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header", labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: labels magic is {magic}, expected {IDX_LABEL_MAGIC}"
            )
        labels = np.frombuffer(_read_exact(fh, label_count, f"{label_count} labels", labels_path),
                               dtype=np.uint8).astype(np.int64)
    if count != label_count:
        raise CountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds {label_count} labels"
        )
    class_count = expected_classes if expected_classes is not None else int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(images, labels, class_count, MNIST_MEAN, MNIST_STD, name="mnist")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write u8 single-channel images and labels as an IDX file pair."""
    if images.ndim == 4:
        if images.shape[3] != 1:
            raise FormatError("IDX export supports single-channel images only")
        images = images[..., 0]
    if images.dtype != np.uint8:
        raise FormatError("IDX export requires u8 pixels")
    m, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, m, rows, cols))
        fh.write(np.ascontiguousarray(images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, m))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def parse_cifar100(bin_path) -> LabeledDataset:
    """Load a CIFAR-100 binary split (train.bin or test.bin), fine labels."""
    with _open_maybe_gzip(bin_path) as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR100_RECORD:
        raise FormatError(
            f"{bin_path}: size {len(raw)} is not a multiple of the {CIFAR100_RECORD}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR100_RECORD)
    labels = records[:, 1].astype(np.int64)
    images = records[:, 2:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return LabeledDataset(images, labels, 100, CIFAR100_MEAN, CIFAR100_STD, name="cifar100")


def synth_blobs(
    class_count: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    split: int = 0,
) -> LabeledDataset:
    """Gaussian clusters with unit noise at mutually distant centers.

    Centers are placed deterministically on scaled coordinate axes, so any
    two sit at least `separation` apart; `separation` well above 1 makes
    the classes linearly separable, 0 collapses them onto one cluster.
    `split` selects a disjoint noise stream (0 train, 1 test) while keeping
    the same centers.
    """
    if class_count < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1 or dim < 1:
        raise ValueError("per_class and dim must be positive")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    axis = np.arange(class_count) % dim
    scale = 1.0 + np.arange(class_count) // dim
    centers = np.zeros((class_count, dim))
    centers[np.arange(class_count), axis] = separation * scale
    rng = stream_gen(seed, "blob-noise", split)
    noise = rng.standard_normal((class_count * per_class, dim))
    labels = np.repeat(np.arange(class_count, dtype=np.int64), per_class)
    points = centers[labels] + noise
    images = points.astype(np.float32).reshape(-1, 1, dim, 1)
    mean = (float(points.mean()),)
    std = (float(points.std()) or 1.0,)
    return LabeledDataset(images, labels, class_count, mean, std, name="synth")


def export_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Export a dataset as IDX, min-max quantizing float features to u8."""
    images = ds.images
    if images.dtype != np.uint8:
        lo, hi = float(images.min()), float(images.max())
        span = (hi - lo) or 1.0
        images = np.round((images.astype(np.float64) - lo) / span * 255.0).astype(np.uint8)
    if ds.class_count > 256:
        raise FormatError("IDX labels are u8; too many classes")
    write_idx(images, ds.labels, images_path, labels_path)


def normalize_images(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    """(N, H, W, C) pixels/features -> normalized (N, C, H, W) float array."""
    x = images.astype(dtype)
    if images.dtype == np.uint8:
        x /= 255.0
    x -= np.asarray(mean, dtype=dtype)
    x /= np.asarray(std, dtype=dtype)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def batches(
    ds: LabeledDataset,
    batch_size: int,
    seed: int,
    epoch: int,
    shuffle: bool = True,
    flip: bool = False,
    crop: bool = False,
    dtype=np.float32,
) -> Iterator[LabeledBatch]:
    """Deterministic mini-batches; the final one may be short.

    The permutation is keyed by (seed, epoch) so the same pair always
    replays the same order; flips and crops draw from their own streams,
    also keyed per epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    m = len(ds)
    order = stream_gen(seed, "shuffle", epoch).permutation(m) if shuffle else np.arange(m)
    flip_rng = stream_gen(seed, "flip", epoch) if flip else None
    crop_rng = stream_gen(seed, "crop", epoch) if crop else None
    for start in range(0, m, batch_size):
        idx = order[start : start + batch_size]
        imgs = ds.images[idx]
        if flip_rng is not None:
            mask = flip_rng.random(len(idx)) < 0.5
            imgs = imgs.copy()
            imgs[mask] = imgs[mask, :, ::-1, :]
        if crop_rng is not None:
            imgs = _random_crop(imgs, crop_rng, pad=4)
        inputs = Tensor(normalize_images(imgs, ds.mean, ds.std, dtype))
        yield LabeledBatch(inputs, ds.labels[idx].copy())


def _random_crop(imgs: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    n, h, w, c = imgs.shape
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=imgs.dtype)
    padded[:, pad : pad + h, pad : pad + w] = imgs
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(imgs)
    for i in range(n):
        out[i] = padded[i, tops[i] : tops[i] + h, lefts[i] : lefts[i] + w]
    return out


def load_mnist(data_dir) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the four official IDX files from `data_dir` (gzipped or raw)."""
    root = Path(data_dir)
    def find(stem):
        for cand in (root / stem, root / f"{stem}.gz", root / "mnist" / stem, root / "mnist" / f"{stem}.gz"):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"missing MNIST file {stem} under {root}")

    train = parse_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"),
                      expected_classes=10)
    test = parse_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"),
                     expected_classes=10)
    return train, test


def load_cifar100(data_dir) -> tuple[LabeledDataset, LabeledDataset]:
    root = Path(data_dir)
    def find(stem):
        for cand in (root / stem, root / "cifar-100-binary" / stem, root / "cifar100" / stem):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"missing CIFAR-100 file {stem} under {root}")

    return parse_cifar100(find("train.bin")), parse_cifar100(find("test.bin"))


def load_synth(
    seed: int,
    class_count: int = 4,
    per_class_train: int = 250,
    per_class_test: int = 125,
    dim: int = 8,
    separation: float = 8.0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test blob splits sharing centers; test reuses train's statistics."""
    train = synth_blobs(class_count, per_class_train, dim, separation, seed, split=0)
    test = synth_blobs(class_count, per_class_test, dim, separation, seed, split=1)
    return train, replace(test, mean=train.mean, std=train.std)
