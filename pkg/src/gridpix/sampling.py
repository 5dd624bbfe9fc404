"""Superpixel-based downsampling/upsampling and the bilinear baseline.

Downsampling replaces a strided reduction with the Q-weighted superpixel
centers; upsampling spreads low-resolution values back to pixels through
the same association map.
"""

from __future__ import annotations

import numpy as np

from .grid import AssociationMap, compute_centers, reconstruct_pixels, superpixel_centers
from .segmentation import boundary_mask
from .tensor import Tensor

__all__ = [
    "downsample",
    "upsample",
    "downsample_tensor",
    "upsample_tensor",
    "bilinear_resize",
    "bilinear_upsample",
    "block_mean",
    "edge_mask",
    "edge_preservation_score",
    "compare_upsamplers",
]


def downsample(assoc: AssociationMap, features: np.ndarray) -> np.ndarray:
    """(H, W, C) features -> (h, w, C) superpixel property centers."""
    return compute_centers(assoc, features).properties


def upsample(assoc: AssociationMap, low_res: np.ndarray) -> np.ndarray:
    """(h, w, C) cell values -> (H, W, C) per-pixel Q-weighted combination."""
    grid = assoc.grid
    low = np.asarray(low_res)
    squeeze = low.ndim == 2
    if squeeze:
        low = low[..., None]
    if low.shape[:2] != (grid.grid_height, grid.grid_width):
        raise ValueError(f"low-res map {low.shape[:2]} does not match grid {grid.grid_height}x{grid.grid_width}")
    q = assoc.to_tensor()
    ct = Tensor(np.ascontiguousarray(low.transpose(2, 0, 1)[None]).astype(q.dtype))
    out = reconstruct_pixels(q, ct, grid.cell).data[0].transpose(1, 2, 0)
    return out[..., 0] if squeeze else out


def downsample_tensor(q: Tensor, features: Tensor, cell: int) -> Tensor:
    """Differentiable (N, C, H, W) -> (N, C, h, w) downsampling."""
    return superpixel_centers(q, features, cell)[0]


def upsample_tensor(q: Tensor, low_res: Tensor, cell: int) -> Tensor:
    """Differentiable (N, C, h, w) -> (N, C, H, W) upsampling."""
    return reconstruct_pixels(q, low_res, cell)


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (H, W) or (H, W, C) with half-pixel centers (align_corners=False).

    Source coordinate of output index ``o`` is ``(o + 0.5) * in / out - 0.5``,
    clamped below at 0; the upper neighbour is clamped to the last index.
    """
    img = np.asarray(image)
    out_h, out_w = size
    h, w = img.shape[:2]
    r0, r1, fy = _axis_weights(h, out_h)
    c0, c1, fx = _axis_weights(w, out_w)
    work = img.astype(np.float64)
    extra = (1,) * (img.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    rows = work[r0] * (1 - fy) + work[r1] * fy
    out = rows[:, c0] * (1 - fx) + rows[:, c1] * fx
    return out.astype(img.dtype) if np.issubdtype(img.dtype, np.floating) else out


def bilinear_upsample(low_res: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = np.asarray(low_res).shape[:2]
    if target[0] < h or target[1] < w:
        raise ValueError(f"target {target} is smaller than the source {h}x{w}")
    return bilinear_resize(low_res, target)


def block_mean(image: np.ndarray, cell: int) -> np.ndarray:
    """Average over each cell x cell block (partial edge blocks use their own pixel count)."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w, c = img.shape
    gh, gw = -(-h // cell), -(-w // cell)
    padded = np.zeros((gh * cell, gw * cell, c))
    padded[:h, :w] = img
    count = np.zeros((gh * cell, gw * cell, 1))
    count[:h, :w] = 1
    sums = padded.reshape(gh, cell, gw, cell, c).sum(axis=(1, 3))
    counts = count.reshape(gh, cell, gw, cell, 1).sum(axis=(1, 3))
    out = sums / counts
    return out[..., 0] if squeeze else out


def edge_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels on either side of a label discontinuity."""
    return boundary_mask(labels)


def edge_preservation_score(full_res_gt: np.ndarray, reconstructed: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error of ``reconstructed`` against ``full_res_gt`` on the masked pixels."""
    gt = np.asarray(full_res_gt, dtype=np.float64)
    rec = np.asarray(reconstructed, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if gt.shape != rec.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {rec.shape}")
    if mask.shape != gt.shape[: mask.ndim]:
        raise ValueError(f"mask {mask.shape} does not match {gt.shape}")
    if not mask.any():
        raise ValueError("edge mask is empty")
    return float(np.abs(gt - rec)[mask].mean())


def compare_upsamplers(assoc: AssociationMap, signal: np.ndarray, labels: np.ndarray):
    """Edge errors of superpixel vs bilinear reconstruction of a 2-D ``signal``.

    The superpixel path is ``upsample(downsample(signal))`` through
    ``assoc``; the baseline bilinearly upsamples the block means at the
    same cell size. Errors are measured on the discontinuities of
    ``labels``. Returns ``(superpixel_error, bilinear_error, superpixel, bilinear)``.
    """
    signal = np.asarray(signal, dtype=np.float64)
    sp = upsample(assoc, downsample(assoc, signal[..., None]))[..., 0]
    bl = bilinear_upsample(block_mean(signal, assoc.grid.cell), signal.shape)
    mask = edge_mask(labels)
    return edge_preservation_score(signal, sp, mask), edge_preservation_score(signal, bl, mask), sp, bl
