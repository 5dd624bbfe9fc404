"""Regular seed grid, 9-cell neighbourhoods and the center/reconstruction operators.

Layout conventions:

* pixel ``p = (x, y)`` uses integer indices, x = column, y = row;
* the owning cell of ``p`` is ``(y // S, x // S)`` (row, column);
* association channel ``k`` refers to the cell at offset
  ``(di, dj) = OFFSETS[k]`` from the owning cell, in row-major order over
  ``{-1, 0, 1}^2`` (channel 4 is the owning cell itself).

The differentiable cores (:func:`superpixel_centers`,
:func:`reconstruct_pixels`) operate on batched channel-first tensors:
association ``(N, 9, H, W)``, features ``(N, C, H, W)``, centers
``(N, C, h, w)``. The :class:`AssociationMap` / :class:`CenterMap`
wrappers use the pixel-major ``(H, W, 9)`` / ``(h, w, C)`` layouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, block_repeat, block_sum, concat, make_node, where

OFFSETS = tuple((di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1))
OWN_CHANNEL = 4
DEGENERATE_MASS = 1e-12


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    cell: int

    def __post_init__(self):
        if self.cell < 2:
            raise ValueError(f"cell size must be >= 2, got {self.cell}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def grid_height(self) -> int:
        return -(-self.height // self.cell)

    @property
    def grid_width(self) -> int:
        return -(-self.width // self.cell)

    @property
    def n_cells(self) -> int:
        return self.grid_height * self.grid_width

    def owner(self, x: int, y: int) -> tuple[int, int]:
        return y // self.cell, x // self.cell

    def owner_rows(self) -> np.ndarray:
        return np.arange(self.height) // self.cell

    def owner_cols(self) -> np.ndarray:
        return np.arange(self.width) // self.cell

    def owner_index_map(self) -> np.ndarray:
        """(H, W) flat index of every pixel's owning cell."""
        return self.owner_rows()[:, None] * self.grid_width + self.owner_cols()[None, :]


def neighborhood(x: int, y: int, grid: GridSpec) -> tuple[list[tuple[int, int]], list[bool]]:
    """The 3x3 cell neighbourhood of pixel (x, y) in channel order, with validity flags."""
    if not (0 <= x < grid.width and 0 <= y < grid.height):
        raise ValueError(f"pixel ({x}, {y}) outside {grid.width}x{grid.height} image")
    r, c = grid.owner(x, y)
    cells, valid = [], []
    for di, dj in OFFSETS:
        cells.append((r + di, c + dj))
        valid.append(0 <= r + di < grid.grid_height and 0 <= c + dj < grid.grid_width)
    return cells, valid


def valid_mask(grid: GridSpec) -> np.ndarray:
    """(9, H, W) boolean mask of channels that point at on-grid cells."""
    rows, cols = grid.owner_rows(), grid.owner_cols()
    mask = np.empty((9, grid.height, grid.width), dtype=bool)
    for k, (di, dj) in enumerate(OFFSETS):
        rv = (rows + di >= 0) & (rows + di < grid.grid_height)
        cv = (cols + dj >= 0) & (cols + dj < grid.grid_width)
        mask[k] = rv[:, None] & cv[None, :]
    return mask


def neighbor_index_map(grid: GridSpec) -> np.ndarray:
    """(9, H, W) flat cell index per channel; -1 where the cell is off-grid."""
    rows, cols = grid.owner_rows(), grid.owner_cols()
    out = np.empty((9, grid.height, grid.width), dtype=np.int64)
    for k, (di, dj) in enumerate(OFFSETS):
        r = rows[:, None] + di
        c = cols[None, :] + dj
        ok = (r >= 0) & (r < grid.grid_height) & (c >= 0) & (c < grid.grid_width)
        out[k] = np.where(ok, r * grid.grid_width + c, -1)
    return out


def pixel_positions(height: int, width: int, dtype=np.float32) -> np.ndarray:
    """(2, H, W) array of (x, y) integer pixel coordinates."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys]).astype(dtype)


@dataclass
class AssociationMap:
    """Per-pixel probabilities over the 9 neighbouring cells, shape (H, W, 9)."""

    probs: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        expected = (self.grid.height, self.grid.width, 9)
        if self.probs.shape != expected:
            raise ValueError(f"association shape {self.probs.shape} != {expected}")

    @classmethod
    def from_tensor(cls, q, cell: int) -> "AssociationMap":
        """Build from a (9, H, W) or (1, 9, H, W) channel-first array or Tensor."""
        arr = q.data if isinstance(q, Tensor) else np.asarray(q)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ValueError("from_tensor takes a single image")
            arr = arr[0]
        grid = GridSpec(arr.shape[1], arr.shape[2], cell)
        return cls(np.ascontiguousarray(arr.transpose(1, 2, 0)), grid)

    @classmethod
    def from_logits(cls, logits: np.ndarray, grid: GridSpec) -> "AssociationMap":
        """Masked softmax of (H, W, 9) logits."""
        z = np.where(valid_mask(grid).transpose(1, 2, 0), logits, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return cls(e / e.sum(axis=-1, keepdims=True), grid)

    @classmethod
    def hard(cls, grid: GridSpec, dtype=np.float64) -> "AssociationMap":
        """Every pixel assigned with probability 1 to its owning cell."""
        probs = np.zeros((grid.height, grid.width, 9), dtype=dtype)
        probs[..., OWN_CHANNEL] = 1
        return cls(probs, grid)

    @classmethod
    def uniform(cls, grid: GridSpec, dtype=np.float64) -> "AssociationMap":
        mask = valid_mask(grid).transpose(1, 2, 0).astype(dtype)
        return cls(mask / mask.sum(axis=-1, keepdims=True), grid)

    @classmethod
    def random(cls, grid: GridSpec, rng: np.random.Generator, scale: float = 2.0) -> "AssociationMap":
        logits = rng.normal(scale=scale, size=(grid.height, grid.width, 9))
        return cls.from_logits(logits, grid)

    def to_tensor(self, requires_grad: bool = False) -> Tensor:
        """(1, 9, H, W) tensor with the same dtype as ``probs``."""
        return Tensor(
            np.ascontiguousarray(self.probs.transpose(2, 0, 1)[None]), requires_grad=requires_grad
        )

    def check(self, atol: float = 1e-6) -> None:
        """Raise if the probability invariants do not hold."""
        p = self.probs
        if np.any(p < 0) or np.any(p > 1 + atol):
            raise ValueError("association probabilities outside [0, 1]")
        mask = valid_mask(self.grid).transpose(1, 2, 0)
        if np.any(p[~mask] != 0):
            raise ValueError("off-grid channels carry probability mass")
        if not np.allclose(p.sum(axis=-1), 1.0, atol=atol, rtol=0):
            raise ValueError("association rows do not sum to 1")


@dataclass
class CenterMap:
    properties: np.ndarray  # (h, w, C)
    locations: np.ndarray  # (h, w, 2), (x, y)
    degenerate: np.ndarray  # (h, w) bool


# ---------------------------------------------------------------------------
# cell-shift pair: scatter sums the 9 owner-indexed planes into the cell grid,
# gather is its adjoint
# ---------------------------------------------------------------------------


def _scatter_np(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:1] + x.shape[2:], dtype=x.dtype)
    for k, (di, dj) in enumerate(OFFSETS):
        src = x[:, k]
        # out[i, j] += src[i - di, j - dj]
        out[..., max(di, 0) : h + min(di, 0), max(dj, 0) : w + min(dj, 0)] += src[
            ..., max(-di, 0) : h - max(di, 0), max(-dj, 0) : w - max(dj, 0)
        ]
    return out


def _gather_np(y: np.ndarray) -> np.ndarray:
    h, w = y.shape[-2:]
    out = np.zeros(y.shape[:1] + (9,) + y.shape[1:], dtype=y.dtype)
    for k, (di, dj) in enumerate(OFFSETS):
        # out[k, a, b] = y[a + di, b + dj]
        out[:, k, ..., max(-di, 0) : h - max(di, 0), max(-dj, 0) : w - max(dj, 0)] = y[
            ..., max(di, 0) : h + min(di, 0), max(dj, 0) : w + min(dj, 0)
        ]
    return out


def scatter_cells(x: Tensor) -> Tensor:
    """(N, 9, ..., h, w) owner-indexed values -> (N, ..., h, w) summed per target cell."""
    return make_node(_scatter_np(x.data), (x,), lambda g: (_gather_np(g),), "scatter_cells")


def gather_cells(y: Tensor) -> Tensor:
    """(N, ..., h, w) cell values -> (N, 9, ..., h, w): value of neighbour k of each owner cell."""
    return make_node(_gather_np(y.data), (y,), lambda g: (_scatter_np(g),), "gather_cells")


# ---------------------------------------------------------------------------
# differentiable cores
# ---------------------------------------------------------------------------


def superpixel_centers(q: Tensor, features: Tensor, cell: int) -> tuple[Tensor, np.ndarray]:
    """Q-weighted feature means per grid cell.

    Returns ``(centers, degenerate)`` with centers of shape (N, C, h, w).
    A cell with total incoming mass below 1e-12 falls back to the plain
    average of the pixels it owns and is flagged in ``degenerate``.
    """
    n, nine, h, w = q.shape
    if nine != 9:
        raise ValueError(f"association needs 9 channels, got {nine}")
    if features.shape[0] != n or features.shape[2:] != (h, w):
        raise ValueError(f"features {features.shape} do not match association {q.shape}")
    c = features.shape[1]
    weighted = q.reshape(n, 9, 1, h, w) * features.reshape(n, 1, c, h, w)
    num = scatter_cells(block_sum(weighted, cell))
    mass = scatter_cells(block_sum(q, cell)).reshape(n, 1, *num.shape[-2:])
    degenerate = mass.data < DEGENERATE_MASS
    if not degenerate.any():
        return num / mass, degenerate[:, 0]
    fallback = block_sum(features, cell).data / block_sum(Tensor(np.ones((1, 1, h, w), features.dtype)), cell).data
    safe = where(degenerate, Tensor(np.ones((), mass.dtype)), mass)
    return where(np.broadcast_to(degenerate, num.shape), Tensor(fallback), num / safe), degenerate[:, 0]


def reconstruct_pixels(q: Tensor, centers: Tensor, cell: int) -> Tensor:
    """Per-pixel Q-weighted combination of the 9 neighbouring centers, (N, C, H, W)."""
    n, _, h, w = q.shape
    c = centers.shape[1]
    neigh = block_repeat(gather_cells(centers), cell, (h, w))  # (N, 9, C, H, W)
    return (neigh * q.reshape(n, 9, 1, h, w)).sum(axis=1)


def with_positions(features: Tensor) -> Tensor:
    """Append the (x, y) coordinate planes to an (N, C, H, W) feature tensor."""
    n, _, h, w = features.shape
    pos = np.broadcast_to(pixel_positions(h, w, features.dtype), (n, 2, h, w))
    return concat([features, Tensor(np.ascontiguousarray(pos))], axis=1)


# ---------------------------------------------------------------------------
# pixel-major public API
# ---------------------------------------------------------------------------


def _features_chw(features, grid: GridSpec, dtype) -> np.ndarray:
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    if f.ndim == 2:
        f = f[..., None]
    if f.shape[:2] != (grid.height, grid.width):
        raise ValueError(f"features {f.shape[:2]} do not match grid {grid.height}x{grid.width}")
    return np.ascontiguousarray(f.transpose(2, 0, 1)[None]).astype(dtype)


def compute_centers(assoc: AssociationMap, features) -> CenterMap:
    """Superpixel property and location centers from an (H, W, C) feature image."""
    q = assoc.to_tensor()
    f = Tensor(_features_chw(features, assoc.grid, q.dtype))
    c = f.shape[1]
    centers, degenerate = superpixel_centers(q, with_positions(f), assoc.grid.cell)
    arr = centers.data[0].transpose(1, 2, 0)
    props = _shifted_property_means(q.data[0], f.data[0], assoc.grid)
    props[degenerate[0]] = arr[..., :c][degenerate[0]]
    return CenterMap(props, arr[..., c:].copy(), degenerate[0])


def _shifted_property_means(q: np.ndarray, f: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Q-weighted property means taken relative to each cell's top-left pixel.

    Mathematically the same as the plain weighted mean, but a cell whose
    contributors all equal its reference value comes out bit-exact, which
    the plain sum-then-divide does not guarantee.
    """
    c = f.shape[0]
    n_cells = grid.grid_height * grid.grid_width
    ref = f[:, :: grid.cell, :: grid.cell].reshape(c, n_cells)
    num = np.zeros((c, n_cells), dtype=f.dtype)
    mass = np.zeros(n_cells, dtype=f.dtype)
    for k, idx in enumerate(neighbor_index_map(grid)):
        valid = idx >= 0
        cells = idx[valid]
        w = q[k][valid]
        mass += np.bincount(cells, w, minlength=n_cells)
        diff = f[:, valid] - ref[:, cells]
        for ch in range(c):
            num[ch] += np.bincount(cells, w * diff[ch], minlength=n_cells)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ref + num / mass
    return out.T.reshape(grid.grid_height, grid.grid_width, c)


def reconstruct(assoc: AssociationMap, centers: CenterMap) -> tuple[np.ndarray, np.ndarray]:
    """Reconstructed (H, W, C) features and (H, W, 2) positions."""
    grid = assoc.grid
    expected = (grid.grid_height, grid.grid_width)
    if centers.properties.shape[:2] != expected or centers.locations.shape[:2] != expected:
        raise ValueError("centers were computed on a different grid")
    q = assoc.to_tensor()
    stacked = np.concatenate([centers.properties, centers.locations], axis=-1)
    ct = Tensor(np.ascontiguousarray(stacked.transpose(2, 0, 1)[None]).astype(q.dtype))
    out = reconstruct_pixels(q, ct, grid.cell).data[0].transpose(1, 2, 0)
    c = centers.properties.shape[-1]
    return out[..., :c].copy(), out[..., c:].copy()


def _csp_window(probs: np.ndarray, grid: GridSpec, i: int, j: int):
    """Raw weights toward cell (i, j) over its 3S x 3S window (clipped at the border)."""
    s = grid.cell
    r0, r1 = max((i - 1) * s, 0), min((i + 2) * s, grid.height)
    c0, c1 = max((j - 1) * s, 0), min((j + 2) * s, grid.width)
    di = i - grid.owner_rows()[r0:r1]
    dj = j - grid.owner_cols()[c0:c1]
    channel = (di[:, None] + 1) * 3 + (dj[None, :] + 1)
    weights = np.take_along_axis(probs[r0:r1, c0:c1], channel[..., None], axis=-1)[..., 0]
    return weights, (slice(r0, r1), slice(c0, c1))


def csp_kernel(assoc: AssociationMap, i: int, j: int) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Normalized kernel of cell (i, j) and the (row, column) slices of its window."""
    weights, window = _csp_window(assoc.probs.astype(np.float64), assoc.grid, i, j)
    total = weights.sum()
    return (weights / total if total > 0 else weights), window


def csp_centers(assoc: AssociationMap, features, cell: int | None = None) -> CenterMap:
    """Centers computed as a per-cell windowed aggregation over the 3S x 3S region.

    For every cell the association weights towards that cell are read off
    its surrounding window, normalized to sum to one, and used as a
    spatially varying kernel over the features and pixel coordinates. This
    is the gather-side counterpart of :func:`compute_centers`.
    """
    grid = assoc.grid
    if cell is not None and cell != grid.cell:
        raise ValueError(f"cell size {cell} does not match grid cell {grid.cell}")
    s = grid.cell
    f = _features_chw(features, grid, np.float64)[0].transpose(1, 2, 0)
    pos = pixel_positions(grid.height, grid.width, np.float64).transpose(1, 2, 0)
    x = np.concatenate([f, pos], axis=-1)
    probs = assoc.probs.astype(np.float64)
    gh, gw = grid.grid_height, grid.grid_width
    out = np.zeros((gh, gw, x.shape[-1]))
    degenerate = np.zeros((gh, gw), dtype=bool)
    for i in range(gh):
        for j in range(gw):
            weights, window = _csp_window(probs, grid, i, j)
            total = weights.sum()
            if total < DEGENERATE_MASS:
                degenerate[i, j] = True
                own = x[i * s : (i + 1) * s, j * s : (j + 1) * s]
                out[i, j] = own.reshape(-1, x.shape[-1]).mean(axis=0)
                continue
            out[i, j] = np.tensordot(weights / total, x[window], axes=([0, 1], [0, 1]))
    c = f.shape[-1]
    return CenterMap(out[..., :c], out[..., c:], degenerate)
