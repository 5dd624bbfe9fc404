"""Synthetic Voronoi-mosaic images with known segment maps."""

from __future__ import annotations

import numpy as np


def voronoi_labels(rng: np.random.Generator, size=(64, 64), n_regions=(8, 15)) -> np.ndarray:
    """(H, W) Voronoi partition with a region count drawn uniformly from ``n_regions`` (inclusive)."""
    h, w = size
    k = int(rng.integers(n_regions[0], n_regions[1] + 1))
    while True:
        seeds = rng.uniform(0, [h, w], size=(k, 2))
        ys, xs = np.mgrid[0:h, 0:w]
        d = (ys[..., None] - seeds[:, 0]) ** 2 + (xs[..., None] - seeds[:, 1]) ** 2
        labels = d.argmin(axis=-1)
        if np.unique(labels).size == k:
            return labels.astype(np.int64)


def voronoi_mosaic(
    rng: np.random.Generator,
    size=(64, 64),
    n_regions=(8, 15),
    noise: float = 0.02,
    min_color_distance: float = 0.25,
) -> tuple[np.ndarray, np.ndarray]:
    """Colored mosaic ``(image, labels)``; adjacent-region colors differ by at least ``min_color_distance``."""
    labels = voronoi_labels(rng, size, n_regions)
    k = int(labels.max()) + 1
    colors = np.empty((k, 3))
    for i in range(k):
        for _ in range(100):
            c = rng.uniform(0.05, 0.95, size=3)
            if i == 0 or np.min(np.linalg.norm(colors[:i] - c, axis=1)) >= min_color_distance:
                break
        colors[i] = c
    image = colors[labels] + rng.normal(0.0, noise, size=labels.shape + (3,))
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def make_corpus(n: int, seed: int, size=(64, 64), n_regions=(8, 15), noise: float = 0.02):
    """``n`` mosaics from one seeded generator, as a list of ``(image, labels)``."""
    rng = np.random.default_rng(seed)
    return [voronoi_mosaic(rng, size, n_regions, noise) for _ in range(n)]


def piecewise_constant_disparity(labels: np.ndarray, rng: np.random.Generator, low=0.0, high=64.0) -> np.ndarray:
    """One random constant "disparity" per region."""
    values = rng.uniform(low, high, size=int(labels.max()) + 1)
    return values[labels]


def uniform_grid_labels(height: int, width: int, cell: int) -> np.ndarray:
    gw = -(-width // cell)
    return (np.arange(height)[:, None] // cell) * gw + np.arange(width)[None, :] // cell
