"""Seeded synthetic datasets: 2-D point clouds and tiny blob images."""

from __future__ import annotations

import numpy as np

from .config import DatasetSpec
from .tensor import Rng

CIRCLE_RADIUS = 2.0
PIXEL_NOISE_STD = 0.05


def gaussian8_centers(radius: float = CIRCLE_RADIUS) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(8) / 8
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def checkerboard_cells() -> np.ndarray:
    """Lower-left corners of the filled cells of a 4x4 board on [-2, 2]^2."""
    cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    return np.array(cells, dtype=float) - 2.0


def blob_anchors(image_size: int) -> np.ndarray:
    """(row, col) centres of a 3x3 lattice spread over the image."""
    lo, hi = 0.2 * (image_size - 1), 0.8 * (image_size - 1)
    coords = np.linspace(lo, hi, 3)
    return np.array([(r, c) for r in coords for c in coords])


def sample_batch(spec: DatasetSpec, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` samples; returns ``(x, y)`` with integer class ids ``y``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.mode == "points":
        if spec.kind == "gaussian8":
            y = rng.integers(0, 8, n)
            x = gaussian8_centers()[y] + spec.mode_std * rng.normal((n, 2))
            return x, y
        if spec.kind == "checkerboard":
            cells = checkerboard_cells()
            pick = rng.integers(0, len(cells), n)
            x = cells[pick] + rng.uniform((n, 2))
            return x, np.zeros(n, dtype=np.int64)
        raise ValueError(f"unknown points kind {spec.kind!r}")
    if spec.mode == "grid":
        size = spec.image_size
        y = rng.integers(0, spec.num_classes, n)
        anchors = blob_anchors(size)[y % 9]
        rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        d2 = ((rows[None] - anchors[:, 0, None, None]) ** 2
              + (cols[None] - anchors[:, 1, None, None]) ** 2)
        img = np.exp(-d2 / (2.0 * spec.blob_std ** 2))
        img = img[:, None].repeat(spec.channels, axis=1)
        img = img + PIXEL_NOISE_STD * rng.normal(img.shape)
        return np.clip(img, -1.0, 1.0), y
    raise ValueError(f"unknown data mode {spec.mode!r}")


def data_shape(spec: DatasetSpec) -> tuple[int, ...]:
    if spec.mode == "points":
        return (2,)
    return (spec.channels, spec.image_size, spec.image_size)
