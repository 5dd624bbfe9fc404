"""Superpixel benchmark metrics: ASA, boundary recall/precision, compactness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .segmentation import LabelMap, boundary_mask

logger = logging.getLogger(__name__)

CSV_HEADER = ["image", "n_superpixels", "asa", "br", "bp", "co", "tolerance_px"]
AGGREGATE_HEADER = ["bucket", "count", "n_superpixels", "asa", "br", "bp", "co"]
BUCKET = 25


@dataclass
class MetricReport:
    asa: float
    br: float
    bp: float
    co: float
    n_superpixels: int
    tolerance_px: int
    flags: list = field(default_factory=list)


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def _check_same(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: prediction {pred.shape} vs ground truth {gt.shape}")


def contingency(pred, gt) -> np.ndarray:
    """Pixel-count table of (superpixel, ground-truth segment) overlaps."""
    pred, gt = _labels(pred), _labels(gt)
    _check_same(pred, gt)
    _, p = np.unique(pred, return_inverse=True)
    _, g = np.unique(gt, return_inverse=True)
    p, g = p.ravel(), g.ravel()
    n_g = int(g.max()) + 1
    table = np.bincount(p * n_g + g, minlength=(int(p.max()) + 1) * n_g)
    return table.reshape(-1, n_g)


def asa(pred, gt) -> float:
    """Fraction of pixels covered when every superpixel takes its best-overlapping segment."""
    table = contingency(pred, gt)
    return float(table.max(axis=1).sum() / table.sum())


def boundary_tolerance(height: int, width: int, fraction: float = 0.0025) -> int:
    """``fraction`` of the image diagonal, rounded half up."""
    return int(math.floor(fraction * math.hypot(height, width) + 0.5))


def _window(mask: np.ndarray, tol: int) -> np.ndarray:
    if tol <= 0:
        return mask
    return binary_dilation(mask, structure=np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool))


def boundary_recall_precision(pred, gt, tolerance: int | None = None, flags: list | None = None):
    """(recall, precision) of superpixel boundaries against ground-truth boundaries.

    Boundary pixels are those with a differently labelled 4-neighbour. A
    ground-truth boundary pixel is recalled when a predicted boundary pixel
    lies within Chebyshev distance ``tolerance``; precision is the
    symmetric ratio. Empty boundary sets score 1.0 and are noted in
    ``flags``.
    """
    pred, gt = _labels(pred), _labels(gt)
    _check_same(pred, gt)
    tol = boundary_tolerance(*gt.shape) if tolerance is None else tolerance
    pb, gb = boundary_mask(pred), boundary_mask(gt)
    if gb.any():
        recall = float((gb & _window(pb, tol)).sum() / gb.sum())
    else:
        recall = 1.0
        if flags is not None:
            flags.append("no ground-truth boundary")
    if pb.any():
        precision = float((pb & _window(gb, tol)).sum() / pb.sum())
    else:
        precision = 1.0
        if flags is not None:
            flags.append("no predicted boundary")
    return recall, precision


def perimeters(labels) -> tuple[np.ndarray, np.ndarray]:
    """(areas, perimeters) per label id; perimeter counts unit edges to other labels or the image border."""
    lab = _labels(labels)
    _, inv = np.unique(lab, return_inverse=True)
    inv = inv.reshape(lab.shape)
    n = int(inv.max()) + 1
    areas = np.bincount(inv.ravel(), minlength=n)
    padded = np.pad(inv, 1, constant_values=-1)
    core = padded[1:-1, 1:-1]
    per = np.zeros(n, dtype=np.int64)
    for shifted in (padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]):
        per += np.bincount(core[shifted != core], minlength=n)
    return areas, per


def compactness(pred) -> float:
    """Area-weighted isoperimetric quotient ``4 pi A / P^2`` clamped to 1."""
    areas, per = perimeters(pred)
    quotient = np.minimum(1.0, 4 * math.pi * areas / per.astype(np.float64) ** 2)
    return float((areas / areas.sum() * quotient).sum())


def evaluate(pred, gt, tolerance: int | None = None) -> MetricReport:
    pred, gt = _labels(pred), _labels(gt)
    _check_same(pred, gt)
    tol = boundary_tolerance(*gt.shape) if tolerance is None else tolerance
    flags: list = []
    br, bp = boundary_recall_precision(pred, gt, tol, flags)
    return MetricReport(
        asa=asa(pred, gt),
        br=br,
        bp=bp,
        co=compactness(pred),
        n_superpixels=int(np.unique(pred).size),
        tolerance_px=tol,
        flags=flags,
    )


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def evaluate_directory(pred_dir, gt_dir, out_csv=None) -> tuple[list, list]:
    """Score every ``<stem>.pgm`` present in both directories.

    Returns ``(rows, missing)`` where ``rows`` are ``(stem, MetricReport)``
    in filename order and ``missing`` lists stems found on only one side.
    Raises when no stem is shared. When ``out_csv`` is given, writes one
    row per image, a blank line, then mean rows per superpixel-count
    bucket (width 25) and an ``all`` row.
    """
    from .io import read_labels

    preds = {p.stem: p for p in Path(pred_dir).glob("*.pgm")}
    gts = {p.stem: p for p in Path(gt_dir).glob("*.pgm")}
    common = sorted(preds.keys() & gts.keys())
    missing = sorted(preds.keys() ^ gts.keys())
    for stem in missing:
        logger.warning("no matching pair for %s", stem)
    if not common:
        raise ValueError(f"no common label files between {pred_dir} and {gt_dir}")
    rows = [(stem, evaluate(read_labels(preds[stem]), read_labels(gts[stem]))) for stem in common]
    if out_csv is not None:
        write_report_csv(out_csv, rows)
    return rows, missing


def aggregate(rows) -> list:
    """Mean metrics per bucket of superpixel count, plus an ``all`` row."""
    groups: dict = {}
    for _, r in rows:
        groups.setdefault(BUCKET * int(math.floor(r.n_superpixels / BUCKET + 0.5)), []).append(r)
    out = []
    for key in sorted(groups):
        out.append((str(key), groups[key]))
    out.append(("all", [r for _, r in rows]))
    summary = []
    for key, reports in out:
        summary.append(
            {
                "bucket": key,
                "count": len(reports),
                "n_superpixels": float(np.mean([r.n_superpixels for r in reports])),
                "asa": float(np.mean([r.asa for r in reports])),
                "br": float(np.mean([r.br for r in reports])),
                "bp": float(np.mean([r.bp for r in reports])),
                "co": float(np.mean([r.co for r in reports])),
            }
        )
    return summary


def write_report_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for stem, r in rows:
            writer.writerow([stem, r.n_superpixels, _fmt(r.asa), _fmt(r.br), _fmt(r.bp), _fmt(r.co), r.tolerance_px])
        fh.write("\n")
        writer.writerow(AGGREGATE_HEADER)
        for row in aggregate(rows):
            writer.writerow(
                [row["bucket"], row["count"], _fmt(row["n_superpixels"])]
                + [_fmt(row[k]) for k in ("asa", "br", "bp", "co")]
            )
