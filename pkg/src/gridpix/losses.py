"""Training objectives built on the center/reconstruction operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import AssociationMap, reconstruct_pixels, superpixel_centers, with_positions
from .tensor import Tensor, make_node, norm

DISTANCES = ("l2", "cross_entropy")


@dataclass
class LossConfig:
    m: float = 0.003
    cell: int = 16
    lam: float = 0.1
    alphas: tuple = (0.5, 0.7, 1.0)
    eps: float = 1e-10
    reduction: str = "mean"

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("compactness weight m must be >= 0")
        if self.cell < 2:
            raise ValueError("cell size S must be >= 2")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if len(self.alphas) != 3:
            raise ValueError("three stage weights are required")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass
class LossTerms:
    """Scalar loss nodes. ``total = property + position``."""

    total: Tensor
    property: Tensor
    position: Tensor
    n_pixels: int

    def as_floats(self) -> dict:
        return {
            "loss": self.total.item(),
            "property": self.property.item(),
            "position": self.position.item(),
        }


def _prepare(assoc, features):
    if isinstance(assoc, AssociationMap):
        q = assoc.to_tensor()
        f = features.data if isinstance(features, Tensor) else np.asarray(features)
        if f.ndim == 2:
            f = f[..., None]
        if f.shape[:2] != (assoc.grid.height, assoc.grid.width):
            raise ValueError(f"features {f.shape} do not match association {assoc.probs.shape}")
        return q, Tensor(np.ascontiguousarray(f.transpose(2, 0, 1)[None]).astype(q.dtype))
    q = assoc
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=q.dtype))
    if f.ndim != 4 or f.shape[0] != q.shape[0] or f.shape[2:] != q.shape[2:]:
        raise ValueError(f"features {f.shape} do not match association {q.shape}")
    return q, f


def general_loss(assoc, features, dist: str, cfg: LossConfig) -> LossTerms:
    """Property-reconstruction error plus (m/S)-weighted position error.

    ``assoc`` is an (N, 9, H, W) Tensor (or an :class:`AssociationMap`),
    ``features`` an (N, C, H, W) Tensor (or (H, W, C) array alongside an
    AssociationMap). Per-pixel terms are summed, or averaged over all
    pixels when ``cfg.reduction == "mean"``.
    """
    if dist not in DISTANCES:
        raise ValueError(f"unknown distance {dist!r}; expected one of {DISTANCES}")
    q, f = _prepare(assoc, features)
    c = f.shape[1]
    target = with_positions(f)
    centers, _ = superpixel_centers(q, target, cfg.cell)
    recon = reconstruct_pixels(q, centers, cfg.cell)
    f_rec = recon[:, :c]
    pos_err = norm(target[:, c:] - recon[:, c:], axis=1)
    if dist == "l2":
        prop = norm(f - f_rec, axis=1)
    else:
        # mixing with eps keeps the argument in [eps, 1], so a perfect reconstruction costs exactly 0
        prop = -(f * (f_rec * (1.0 - cfg.eps) + cfg.eps).log()).sum(axis=1)
    n_pixels = q.shape[0] * q.shape[2] * q.shape[3]
    scale = 1.0 / n_pixels if cfg.reduction == "mean" else 1.0
    prop_total = prop.sum() * scale
    pos_total = pos_err.sum() * (scale * cfg.m / cfg.cell)
    return LossTerms(prop_total + pos_total, prop_total, pos_total, n_pixels)


def slic_loss(assoc, lab_image, cfg: LossConfig) -> LossTerms:
    """CIELAB color reconstruction (Euclidean) plus compactness."""
    return general_loss(assoc, lab_image, "l2", cfg)


def semantic_loss(assoc, onehot, cfg: LossConfig) -> LossTerms:
    """Cross-entropy between one-hot labels and their reconstruction, plus compactness."""
    return general_loss(assoc, onehot, "cross_entropy", cfg)


def smooth_l1(x):
    """0.5 x^2 where |x| < 1, |x| - 0.5 elsewhere. Accepts Tensors, arrays and scalars."""
    if not isinstance(x, Tensor):
        a = np.asarray(x, dtype=float)
        out = np.where(np.abs(a) < 1, 0.5 * a * a, np.abs(a) - 0.5)
        return float(out) if out.ndim == 0 else out
    a = x.data
    small = np.abs(a) < 1
    out = np.where(small, 0.5 * a * a, np.abs(a) - 0.5).astype(a.dtype)
    return make_node(out, (x,), lambda g: (g * np.where(small, a, np.sign(a)),), "smooth_l1")


def joint_loss(preds, gt, valid, assoc, lab_image, cfg: LossConfig) -> Tensor:
    """Weighted three-stage smooth-L1 disparity loss plus lambda-scaled SLIC loss.

    ``preds`` are three Tensors shaped like ``gt``; the disparity terms are
    averaged over the ``valid`` pixels, and the summed SLIC loss is divided
    by the same count.
    """
    if len(preds) != 3:
        raise ValueError("joint loss needs exactly three stage predictions")
    gt = np.asarray(gt)
    valid = np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("valid mask is empty")
    weight = valid.astype(preds[0].dtype) / n_valid
    total = None
    for alpha, pred in zip(cfg.alphas, preds):
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} does not match ground truth {gt.shape}")
        term = (smooth_l1(pred - Tensor(gt.astype(pred.dtype))) * weight).sum() * alpha
        total = term if total is None else total + term
    if cfg.lam > 0:
        summed = LossConfig(m=cfg.m, cell=cfg.cell, eps=cfg.eps, reduction="sum")
        total = total + slic_loss(assoc, lab_image, summed).total * (cfg.lam / n_valid)
    return total
