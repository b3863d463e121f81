"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic data.

Loaders are pure (same bytes -> same Dataset), scale pixels by 1/255 with no
other preprocessing, and never download anything; paths come from the caller.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 2051  # 0x00000803
IDX_LABEL_MAGIC = 2049  # 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


class DataFormatError(Exception):
    """Raised for malformed dataset files (bad magic, truncation, bad labels)."""


@dataclass
class Dataset:
    inputs: np.ndarray   # float64 in [0, 1]; N x features or N x C x H x W
    labels: np.ndarray   # int64 class indices in [0, num_classes)
    num_classes: int = 10

    def __post_init__(self):
        if len(self.labels) != len(self.inputs):
            raise DataFormatError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max(initial=0) >= self.num_classes:
            raise DataFormatError(
                f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)


def _read_be32(f, path):
    raw = f.read(4)
    if len(raw) != 4:
        raise DataFormatError(f"{path}: truncated header")
    return struct.unpack(">i", raw)[0]


def load_mnist_idx(images_path, labels_path) -> Dataset:
    # IDX image file (big endian):
    #   i32 magic (2051) | i32 count | i32 rows | i32 cols | u8 pixels row-wise
    # IDX label file:
    #   i32 magic (2049) | i32 count | u8 labels
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: wrong magic {magic} (expected {IDX_IMAGE_MAGIC})")
        count = _read_be32(f, images_path)
        rows = _read_be32(f, images_path)
        cols = _read_be32(f, images_path)
        payload = f.read()
    if len(payload) < count * rows * cols:
        raise DataFormatError(
            f"{images_path}: truncated payload "
            f"({len(payload)} bytes for {count}x{rows}x{cols})")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=count * rows * cols)
    inputs = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: wrong magic {magic} (expected {IDX_LABEL_MAGIC})")
        label_count = _read_be32(f, labels_path)
        raw = f.read()
    if len(raw) < label_count:
        raise DataFormatError(f"{labels_path}: truncated payload")
    if label_count != count:
        raise DataFormatError(
            f"count mismatch: {count} images but {label_count} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, count=label_count).astype(np.int64)
    return Dataset(inputs, labels)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of the image half of load_mnist_idx; expects N x H x W uint8."""
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_cifar10_bin(batch_paths) -> Dataset:
    # Each record: u8 label | 3072 u8 pixels, channel-major 3 x 32 x 32.
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    chunks_x, chunks_y = [], []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
        n = len(raw) // CIFAR_RECORD_BYTES
        if n == 0:
            continue
        records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        if labels.max(initial=0) >= 10:
            raise DataFormatError(f"{path}: label {int(labels.max())} >= 10")
        chunks_x.append(records[:, 1:].astype(np.float64).reshape(n, 3, 32, 32) / 255.0)
        chunks_y.append(labels)
    if not chunks_x:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64))
    return Dataset(np.concatenate(chunks_x), np.concatenate(chunks_y))


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of load_cifar10_bin for one batch file; images N x 3 x 32 x 32 uint8."""
    n = len(labels)
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = np.ascontiguousarray(images, dtype=np.uint8).reshape(n, 3072)
    Path(path).write_bytes(records.tobytes())


def synthetic_blobs(seed: int, n_per_class: int, num_classes: int, dim: int,
                    spread: float = 0.05) -> Dataset:
    """Gaussian blobs with well-separated means, clipped to [0, 1].

    Linearly separable at the default spread; the fast deterministic stand-in
    for image data in unit tests.
    """
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    inputs = np.empty((n_per_class * num_classes, dim))
    labels = np.empty(n_per_class * num_classes, dtype=np.int64)
    for c in range(num_classes):
        lo = c * n_per_class
        inputs[lo:lo + n_per_class] = means[c] + spread * rng.standard_normal((n_per_class, dim))
        labels[lo:lo + n_per_class] = c
    np.clip(inputs, 0.0, 1.0, out=inputs)
    return Dataset(inputs, labels, num_classes)


# Coarse 5x3 glyph bitmaps for digits 0-9, upscaled and jittered by
# synthetic_digits. Deliberately confusable pairs (8/9, 3/9, 5/6) keep the
# task non-trivial.
_DIGIT_GLYPHS = [
    ["111", "101", "101", "101", "111"],  # 0
    ["010", "110", "010", "010", "111"],  # 1
    ["111", "001", "111", "100", "111"],  # 2
    ["111", "001", "111", "001", "111"],  # 3
    ["101", "101", "111", "001", "001"],  # 4
    ["111", "100", "111", "001", "111"],  # 5
    ["111", "100", "111", "101", "111"],  # 6
    ["111", "001", "001", "001", "001"],  # 7
    ["111", "101", "111", "101", "111"],  # 8
    ["111", "101", "111", "001", "111"],  # 9
]


def _glyph_array(digit: int) -> np.ndarray:
    return np.array([[int(ch) for ch in row] for row in _DIGIT_GLYPHS[digit]], dtype=np.float64)


def synthetic_digits(seed: int, n_per_class: int) -> Dataset:
    """Digit-like 28x28 grayscale images: upscaled glyphs with random shifts,
    per-stroke intensity, smoothing, and pixel noise. Flattened to N x 784."""
    rng = np.random.default_rng(seed)
    n = n_per_class * 10
    images = np.zeros((n, 28, 28))
    labels = np.empty(n, dtype=np.int64)
    for c in range(10):
        glyph = np.kron(_glyph_array(c), np.ones((4, 4)))  # 20 x 12
        for i in range(n_per_class):
            idx = c * n_per_class + i
            canvas = np.zeros((28, 28))
            dy = rng.integers(0, 9)   # 28 - 20 + 1
            dx = rng.integers(0, 17)  # 28 - 12 + 1
            intensity = rng.uniform(0.6, 1.0)
            canvas[dy:dy + 20, dx:dx + 12] = glyph * intensity
            # cheap 3x3 box smoothing to soften stroke edges
            padded = np.pad(canvas, 1)
            smooth = sum(padded[r:r + 28, s:s + 28] for r in range(3) for s in range(3)) / 9.0
            smooth += rng.normal(0.0, 0.05, size=(28, 28))
            images[idx] = np.clip(smooth, 0.0, 1.0)
            labels[idx] = c
    return Dataset(images.reshape(n, 784), labels)


def synthetic_cifar(seed: int, n_per_class: int) -> Dataset:
    """Ten synthetic 3x32x32 classes: class-specific color plus an oriented
    stripe pattern, with jittered phase and pixel noise."""
    rng = np.random.default_rng(seed)
    n = n_per_class * 10
    images = np.zeros((n, 3, 32, 32))
    labels = np.empty(n, dtype=np.int64)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    base_colors = np.array([
        [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9], [0.9, 0.9, 0.2],
        [0.9, 0.2, 0.9], [0.2, 0.9, 0.9], [0.7, 0.5, 0.2], [0.5, 0.2, 0.7],
        [0.3, 0.7, 0.5], [0.6, 0.6, 0.6],
    ])
    for c in range(10):
        angle = np.pi * c / 10.0
        freq = 0.4 + 0.15 * (c % 3)
        wave_base = np.cos(angle) * xx + np.sin(angle) * yy
        for i in range(n_per_class):
            idx = c * n_per_class + i
            phase = rng.uniform(0, 2 * np.pi)
            pattern = 0.5 + 0.5 * np.sin(freq * wave_base + phase)
            img = base_colors[c][:, None, None] * pattern[None, :, :]
            img = img + rng.normal(0.0, 0.05, size=(3, 32, 32))
            images[idx] = np.clip(img, 0.0, 1.0)
            labels[idx] = c
    return Dataset(images, labels)


def shuffled(dataset: Dataset, seed) -> Dataset:
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(perm)
