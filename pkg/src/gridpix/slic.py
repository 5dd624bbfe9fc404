"""sRGB -> CIELAB conversion and classical SLIC superpixels."""

from __future__ import annotations

import math
import warnings

import numpy as np

from .grid import AssociationMap, GridSpec, OFFSETS, pixel_positions, valid_mask
from .grid import compute_centers
from .segmentation import LabelMap, enforce_connectivity

# linear sRGB -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# white point taken from the matrix itself so that (1, 1, 1) maps to a = b = 0
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def _lab_f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """(..., 3) sRGB in [0, 1] -> CIELAB (L in [0, 100]).

    Values outside [0, 1] are clamped and reported with a RuntimeWarning.
    """
    rgb = np.asarray(image, dtype=np.float64)
    bad = int(np.count_nonzero((rgb < 0) | (rgb > 1)))
    if bad:
        warnings.warn(f"rgb_to_lab: clamped {bad} out-of-range values", RuntimeWarning, stacklevel=2)
        rgb = np.clip(rgb, 0.0, 1.0)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T / _WHITE
    fx, fy, fz = (_lab_f(xyz[..., i]) for i in range(3))
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; results are clipped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    linear = np.clip(xyz @ _XYZ_TO_RGB.T, 0.0, 1.0)
    rgb = np.where(linear <= 0.0031308, 12.92 * linear, 1.055 * linear ** (1 / 2.4) - 0.055)
    return np.clip(rgb, 0.0, 1.0)


def seed_grid(height: int, width: int, k: int) -> tuple[int, int]:
    """Rows and columns of a seed grid with at most ``k`` seeds, close to square cells."""
    cols = min(width, k, max(1, math.ceil(math.sqrt(k * width / height))))
    rows = min(height, max(1, k // cols))
    return rows, cols


def _gradient_magnitude(lab: np.ndarray) -> np.ndarray:
    p = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = p[1:-1, 2:] - p[1:-1, :-2]
    dy = p[2:, 1:-1] - p[:-2, 1:-1]
    return (dx**2).sum(-1) + (dy**2).sum(-1)


def initial_seeds(lab: np.ndarray, k: int, perturb: bool = True) -> np.ndarray:
    """(K, 5) seeds [L, a, b, x, y] on a regular grid, optionally moved to the
    lowest-gradient pixel of their 3x3 neighbourhood."""
    h, w = lab.shape[:2]
    rows, cols = seed_grid(h, w, k)
    ys = ((np.arange(rows) + 0.5) * h / rows).astype(np.int64)
    xs = ((np.arange(cols) + 0.5) * w / cols).astype(np.int64)
    grad = _gradient_magnitude(lab) if perturb else None
    seeds = []
    for y in ys:
        for x in xs:
            if perturb:
                y0, y1 = max(y - 1, 0), min(y + 2, h)
                x0, x1 = max(x - 1, 0), min(x + 2, w)
                win = grad[y0:y1, x0:x1]
                dy, dx = np.unravel_index(np.argmin(win), win.shape)
                y, x = y0 + dy, x0 + dx
            seeds.append([*lab[y, x], x, y])
    return np.asarray(seeds, dtype=np.float64)


def slic(
    lab: np.ndarray,
    n_superpixels: int,
    m: float = 10.0,
    iterations: int = 10,
    enforce: bool = True,
    min_size_fraction: float = 0.25,
    history: list | None = None,
) -> LabelMap:
    """K-means over [L, a, b, x, y] restricted to 2S x 2S windows around each center.

    The distance is ``sqrt(d_lab^2 + (m / S)^2 d_xy^2)`` with
    ``S = sqrt(N / K)``. A pixel keeps its current center unless a center
    whose window covers it is strictly closer, so the summed squared
    distance never increases; per-iteration values are appended to
    ``history`` when given.
    """
    lab = np.asarray(lab, dtype=np.float64)
    h, w = lab.shape[:2]
    if n_superpixels < 1 or iterations < 1:
        raise ValueError("n_superpixels and iterations must be >= 1")
    if n_superpixels > h * w:
        raise ValueError(f"{n_superpixels} superpixels requested for a {h}x{w} image")
    step = math.sqrt(h * w / n_superpixels)
    weight = (m / step) ** 2
    centers = initial_seeds(lab, n_superpixels)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    radius = int(math.ceil(step))

    def sq_dist(c, rows, cols):
        d_lab = ((lab[rows, cols] - c[:3]) ** 2).sum(-1)
        d_xy = (xs[rows, cols] - c[3]) ** 2 + (ys[rows, cols] - c[4]) ** 2
        return d_lab + weight * d_xy

    # start from nearest-seed (Voronoi) labels
    labels = np.zeros((h, w), dtype=np.int64)
    dist = np.full((h, w), np.inf)
    for i, c in enumerate(centers):
        d = (xs - c[3]) ** 2 + (ys - c[4]) ** 2
        better = d < dist
        labels[better] = i
        dist[better] = d[better]

    feats = np.concatenate([lab, xs[..., None], ys[..., None]], axis=-1)
    for _ in range(iterations):
        # cost of current assignment under current centers
        c_lab = centers[labels, :3]
        c_xy = centers[labels, 3:]
        dist = ((lab - c_lab) ** 2).sum(-1) + weight * ((feats[..., 3:] - c_xy) ** 2).sum(-1)
        for i, c in enumerate(centers):
            y0, y1 = max(int(c[4]) - radius, 0), min(int(c[4]) + radius + 1, h)
            x0, x1 = max(int(c[3]) - radius, 0), min(int(c[3]) + radius + 1, w)
            if y0 >= y1 or x0 >= x1:
                continue
            win = (slice(y0, y1), slice(x0, x1))
            d = sq_dist(c, *win)
            better = d < dist[win]
            dist[win][better] = d[better]
            labels[win][better] = i
        k = len(centers)
        counts = np.bincount(labels.ravel(), minlength=k)
        sums = np.stack([np.bincount(labels.ravel(), weights=feats[..., j].ravel(), minlength=k) for j in range(5)], axis=1)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if history is not None:
            c_all = centers[labels]
            cost = ((lab - c_all[..., :3]) ** 2).sum(-1) + weight * ((feats[..., 3:] - c_all[..., 3:]) ** 2).sum(-1)
            history.append(float(cost.sum()))
    if not enforce:
        return LabelMap(labels, len(centers))
    return enforce_connectivity(labels, max(1, int(round(step))), min_size_fraction)


def soft_slic_association(
    lab: np.ndarray,
    cell: int,
    m: float = 10.0,
    iterations: int = 5,
    temperature: float = 1.0,
) -> AssociationMap:
    """Soft SLIC restricted to the 9-cell neighbourhood, giving an association map without a network.

    Each round sets ``q_s(p)`` proportional to ``exp(-D^2(p, s) / T)`` over
    the valid neighbouring cells and recomputes the centers from the new
    weights.
    """
    lab = np.asarray(lab, dtype=np.float64)
    h, w = lab.shape[:2]
    grid = GridSpec(h, w, cell)
    assoc = AssociationMap.hard(grid)
    pos = pixel_positions(h, w, np.float64).transpose(1, 2, 0)
    mask = valid_mask(grid).transpose(1, 2, 0)
    weight = (m / cell) ** 2
    rows, cols = grid.owner_rows(), grid.owner_cols()
    gh, gw = grid.grid_height, grid.grid_width
    for _ in range(iterations):
        centers = compute_centers(assoc, lab)
        d2 = np.full((h, w, 9), np.inf)
        for k, (di, dj) in enumerate(OFFSETS):
            r = np.clip(rows + di, 0, gh - 1)
            c = np.clip(cols + dj, 0, gw - 1)
            u = centers.properties[r[:, None], c[None, :]]
            loc = centers.locations[r[:, None], c[None, :]]
            d2[..., k] = ((lab - u) ** 2).sum(-1) + weight * ((pos - loc) ** 2).sum(-1)
        logits = np.where(mask, -d2 / temperature, -np.inf)
        assoc = AssociationMap.from_logits(logits, grid)
    return assoc
