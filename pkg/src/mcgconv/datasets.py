"""Dataset generation and ingestion.

Synthetic generators are fully seeded: ``shapes_classify`` draws binary
shapes (disk, square, cross, bar) under random scale/rotation/shear with
2x supersampled edges; ``gaussian_denoise`` builds smooth procedural
textures in [0, 1] and adds white Gaussian noise whose level is given in
8-bit units (sigma 25 means std 25/255 on the normalized scale) and is
left unclipped so the realized noise keeps the requested deviation.

File loaders cover the big-endian IDX layout (magic 0x00000803 for image
cubes, 0x00000801 for label vectors) and the 3073-byte-record CIFAR
binary layout; pixel bytes are normalized to [0, 1].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .affine import TransformParams, transform_matrix

SHAPE_CLASSES = ("disk", "square", "cross", "bar")

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
CIFAR_RECORD_BYTES = 3073


class DatasetFormatError(Exception):
    """Base class for dataset file parsing failures."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64
    labels: np.ndarray | None = None  # (n,) int64
    targets: np.ndarray | None = None  # (n, c, h, w) float64, clean references
    sigmas: np.ndarray | None = None  # (n,) noise levels in 8-bit units
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.labels is not None and self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("label count does not match image count")
        if self.targets is not None and self.targets.shape != self.images.shape:
            raise ValueError("target shape does not match image shape")

    def __len__(self):
        return self.images.shape[0]


def _shape_indicator(kind: str, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Class indicator on unit-scaled coordinates (shape radius ~ 1)."""
    if kind == "disk":
        return (px * px + py * py <= 1.0).astype(np.float64)
    if kind == "square":
        return ((np.abs(px) <= 0.9) & (np.abs(py) <= 0.9)).astype(np.float64)
    if kind == "cross":
        arm = 0.35
        return (
            ((np.abs(px) <= arm) | (np.abs(py) <= arm))
            & (np.abs(px) <= 1.05)
            & (np.abs(py) <= 1.05)
        ).astype(np.float64)
    if kind == "bar":
        return ((np.abs(px) <= 1.15) & (np.abs(py) <= 0.28)).astype(np.float64)
    raise ValueError(f"unknown shape class {kind!r}")


def _render_shape(kind: str, size: int, params: TransformParams,
                  shift, radius: float) -> np.ndarray:
    c = (size - 1) / 2.0
    m_inv = np.linalg.inv(transform_matrix(params))
    sub = np.array([-0.25, 0.25])
    acc = np.zeros((size, size))
    cols = np.arange(size, dtype=np.float64)
    for dy in sub:
        for dx in sub:
            xs, ys = np.meshgrid(cols + dx, cols + dy, indexing="xy")
            vx = (xs - c - shift[0])
            vy = (ys - c - shift[1])
            qx = (m_inv[0, 0] * vx + m_inv[0, 1] * vy) / radius
            qy = (m_inv[1, 0] * vx + m_inv[1, 1] * vy) / radius
            acc += _shape_indicator(kind, qx, qy)
    return acc / 4.0


def make_shapes_dataset(size: int, seed: int, image_size: int = 24,
                        split: str = "train") -> Dataset:
    """Randomly transformed binary shapes with class labels 0..3."""
    if size < 1:
        raise ValueError("need at least one sample")
    rng = np.random.Generator(np.random.Philox(seed))
    images = np.empty((size, 1, image_size, image_size))
    labels = np.empty(size, dtype=np.int64)
    base_radius = image_size * 0.27
    for i in range(size):
        cls = int(rng.integers(0, len(SHAPE_CLASSES)))
        alpha = rng.uniform(-0.35, 0.35)  # scale factor roughly [0.78, 1.27]
        theta = rng.uniform(-math.pi, math.pi)
        shear = math.tan(rng.uniform(-0.15 * math.pi, 0.15 * math.pi))
        shift = rng.uniform(-1.5, 1.5, size=2)
        params = TransformParams(alpha, theta, shear)
        images[i, 0] = _render_shape(
            SHAPE_CLASSES[cls], image_size, params, shift, base_radius
        )
        labels[i] = cls
    return Dataset(images=images, labels=labels, split=split)


def _smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    cols = np.arange(size, dtype=np.float64)
    xs, ys = np.meshgrid(cols, cols, indexing="xy")
    img = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.uniform(-0.35, 0.35, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        img += rng.uniform(0.3, 1.0) * np.sin(fx * xs + fy * ys + phase)
    for _ in range(2):
        cx, cy = rng.uniform(0, size - 1, size=2)
        sigma = rng.uniform(size / 8.0, size / 3.0)
        img += rng.uniform(0.5, 1.5) * np.exp(
            -((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma)
        )
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)


def make_denoise_dataset(size: int, noise_sigma_range, seed: int,
                         image_size: int = 41, split: str = "train") -> Dataset:
    """Smooth textures plus additive Gaussian noise, sigma in 8-bit units."""
    if size < 1:
        raise ValueError("need at least one sample")
    lo, hi = float(noise_sigma_range[0]), float(noise_sigma_range[1])
    if lo < 0.0 or hi < lo:
        raise ValueError(f"bad noise range [{lo}, {hi}]")
    rng = np.random.Generator(np.random.Philox(seed))
    clean = np.empty((size, 1, image_size, image_size))
    noisy = np.empty_like(clean)
    sigmas = np.empty(size)
    for i in range(size):
        clean[i, 0] = _smooth_texture(rng, image_size)
        sigmas[i] = rng.uniform(lo, hi)
        noisy[i, 0] = clean[i, 0] + rng.standard_normal(
            (image_size, image_size)
        ) * (sigmas[i] / 255.0)
    return Dataset(images=noisy, targets=clean, sigmas=sigmas, split=split)


def make_synthetic_dataset(kind: str, size: int, noise_sigma_range=(0.0, 55.0),
                           seed: int = 0, image_size: int | None = None,
                           split: str = "train") -> Dataset:
    if kind == "shapes_classify":
        return make_shapes_dataset(size, seed, image_size or 24, split)
    if kind == "gaussian_denoise":
        return make_denoise_dataset(size, noise_sigma_range, seed,
                                    image_size or 41, split)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


# -- binary file loaders -------------------------------------------------------


def _read_exact(handle, count: int, what: str) -> bytes:
    data = handle.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"file ends inside {what} ({len(data)}/{count} bytes)")
    return data


def load_idx(images_path, labels_path=None, split: str = "test") -> Dataset:
    """Parse big-endian IDX files into a dataset, pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, count = struct.unpack(">II", _read_exact(fh, 8, "IDX image header"))
        if magic != IDX_MAGIC_IMAGES:
            raise BadMagicError(
                f"bad IDX image magic 0x{magic:08x}, expected 0x{IDX_MAGIC_IMAGES:08x}"
            )
        rows, cols = struct.unpack(">II", _read_exact(fh, 8, "IDX image dims"))
        raw = _read_exact(fh, count * rows * cols, "IDX pixel data")
    images = (
        np.frombuffer(raw, dtype=np.uint8)
        .reshape(count, 1, rows, cols)
        .astype(np.float64)
        / 255.0
    )
    labels = None
    if labels_path is not None:
        labels = load_idx_labels(labels_path, expect_count=count)
    return Dataset(images=images, labels=labels, split=split)


def load_idx_labels(path, expect_count: int | None = None,
                    num_classes: int = 10) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, count = struct.unpack(">II", _read_exact(fh, 8, "IDX label header"))
        if magic != IDX_MAGIC_LABELS:
            raise BadMagicError(
                f"bad IDX label magic 0x{magic:08x}, expected 0x{IDX_MAGIC_LABELS:08x}"
            )
        raw = _read_exact(fh, count, "IDX label data")
    if expect_count is not None and count != expect_count:
        raise DatasetFormatError(
            f"label count {count} does not match image count {expect_count}"
        )
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(
            f"label {int(labels.max())} outside [0, {num_classes})"
        )
    return labels


def load_cifar_binary(path, num_classes: int = 10, split: str = "test") -> Dataset:
    """Parse CIFAR binary records (1 label byte + 3072 pixel bytes)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise TruncatedFileError(
            f"file size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise LabelRangeError(f"label {int(labels.max())} outside [0, {num_classes})")
    images = (
        records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    )
    return Dataset(images=images, labels=labels, split=split)
