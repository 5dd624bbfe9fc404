"""Hard assignment of association maps and connectivity post-processing."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .grid import AssociationMap, neighbor_index_map


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) non-negative ints
    n_labels: int

    @classmethod
    def from_array(cls, labels) -> "LabelMap":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        return cls(labels, int(labels.max()) + 1 if labels.size else 0)

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def compact(self) -> "LabelMap":
        return LabelMap(*compact_labels(self.labels))

    def n_distinct(self) -> int:
        return int(np.unique(self.labels).size)


def _as_labels(labels) -> np.ndarray:
    return labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)


def compact_labels(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber labels 0..K-1 in raster order of first appearance."""
    flat = labels.ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank[inverse].reshape(labels.shape).astype(np.int64), int(order.size)


def hard_assign(assoc: AssociationMap) -> LabelMap:
    """Label each pixel with the flat index of its most probable cell.

    Ties go to the lowest channel index.
    """
    best = np.argmax(assoc.probs, axis=-1)  # first maximum wins
    cells = neighbor_index_map(assoc.grid)
    labels = np.take_along_axis(cells.transpose(1, 2, 0), best[..., None], axis=-1)[..., 0]
    if np.any(labels < 0):
        raise ValueError("association puts its maximum on an off-grid cell")
    return LabelMap(labels.astype(np.int64), assoc.grid.n_cells)


def _neighbor_pairs(shape):
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return a, b


def connected_regions(labels) -> tuple[np.ndarray, int]:
    """4-connected components of equal-label pixels, numbered in raster order."""
    lab = _as_labels(labels)
    h, w = lab.shape
    a, b = _neighbor_pairs(lab.shape)
    flat = lab.ravel()
    same = flat[a] == flat[b]
    graph = coo_matrix((np.ones(same.sum(), dtype=np.int8), (a[same], b[same])), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    comp, n = compact_labels(comp.reshape(h, w))
    return comp, n


def enforce_connectivity(labels, cell: int, min_size_fraction: float = 0.25) -> LabelMap:
    """Make every label a single 4-connected region of reasonable size.

    Only the largest component of each input label survives as a label of
    its own, provided it has at least ``min_size_fraction * cell**2``
    pixels. Every other component (smallest first) joins the adjacent
    component with which it shares the longest boundary; ties go to the
    neighbour with the smaller id. The output therefore never has more
    labels than the input. Returned labels are compacted.
    """
    lab = _as_labels(labels)
    comp, n = connected_regions(lab)
    if n <= 1:
        return LabelMap(comp, n)
    threshold = min_size_fraction * cell * cell
    sizes = np.bincount(comp.ravel(), minlength=n).astype(np.int64)

    a, b = _neighbor_pairs(comp.shape)
    ca, cb = comp.ravel()[a], comp.ravel()[b]
    diff = ca != cb
    lo = np.minimum(ca[diff], cb[diff])
    hi = np.maximum(ca[diff], cb[diff])
    keys, counts = np.unique(lo * n + hi, return_counts=True)
    adjacency: list[dict[int, int]] = [dict() for _ in range(n)]
    for key, cnt in zip(keys.tolist(), counts.tolist()):
        u, v = divmod(key, n)
        adjacency[u][v] = cnt
        adjacency[v][u] = cnt

    parent = np.arange(n)
    alive = np.ones(n, dtype=bool)
    # component id of the largest piece of each input label (first in raster order on ties)
    owner = lab.ravel()[np.unique(comp.ravel(), return_index=True)[1]]
    order = np.lexsort((np.arange(n), -sizes, owner))
    first = np.ones(n, dtype=bool)
    first[1:] = owner[order][1:] != owner[order][:-1]
    orphan = np.ones(n, dtype=bool)
    orphan[order[first]] = False

    def doomed(i):
        return orphan[i] or sizes[i] < threshold

    heap = [(int(sizes[i]), i) for i in range(n) if doomed(i)]
    heapq.heapify(heap)
    while heap:
        size, c = heapq.heappop(heap)
        if not alive[c] or size != sizes[c] or not doomed(c):
            continue
        if not adjacency[c]:
            continue  # the whole image is one component
        target = min(adjacency[c].items(), key=lambda kv: (-kv[1], kv[0]))[0]
        # fold c into target
        for other, cnt in adjacency[c].items():
            if other == target:
                continue
            adjacency[other].pop(c)
            adjacency[other][target] = adjacency[other].get(target, 0) + cnt
            adjacency[target][other] = adjacency[target].get(other, 0) + cnt
        adjacency[target].pop(c)
        adjacency[c] = {}
        alive[c] = False
        parent[c] = target
        sizes[target] += sizes[c]
        sizes[c] = 0
        if doomed(target):
            heapq.heappush(heap, (int(sizes[target]), target))

    # resolve merge chains
    root = parent.copy()
    for i in range(n):
        r = i
        while root[r] != r:
            r = root[r]
        root[i] = r
    merged, count = compact_labels(root[comp])
    return LabelMap(merged, count)


def boundary_mask(labels) -> np.ndarray:
    """Pixels whose 4-neighbourhood contains a different label."""
    lab = _as_labels(labels)
    mask = np.zeros(lab.shape, dtype=bool)
    dv = lab[1:] != lab[:-1]
    dh = lab[:, 1:] != lab[:, :-1]
    mask[1:] |= dv
    mask[:-1] |= dv
    mask[:, 1:] |= dh
    mask[:, :-1] |= dh
    return mask


def overlay_boundaries(image: np.ndarray, labels, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Copy of ``image`` with superpixel boundary pixels painted ``color``."""
    lab = _as_labels(labels)
    img = np.array(image, copy=True)
    if img.shape[:2] != lab.shape:
        raise ValueError(f"image {img.shape[:2]} and labels {lab.shape} differ in size")
    img[boundary_mask(lab)] = color
    return img
