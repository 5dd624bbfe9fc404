import numpy as np
import pytest

from gridpix.grid import AssociationMap, GridSpec, neighbor_index_map
from gridpix.segmentation import (
    LabelMap,
    boundary_mask,
    compact_labels,
    connected_regions,
    enforce_connectivity,
    hard_assign,
    overlay_boundaries,
)

from oracles import flood_fill_components


def test_hard_q_gives_block_partition():
    g = GridSpec(8, 8, 4)
    labels = hard_assign(AssociationMap.hard(g)).labels
    expected = np.repeat(np.repeat(np.arange(4).reshape(2, 2), 4, 0), 4, 1)
    np.testing.assert_array_equal(labels, expected)


def test_tie_goes_to_lowest_channel():
    g = GridSpec(4, 4, 2)
    probs = AssociationMap.hard(g).probs.copy()
    probs[2, 2] = 0.0
    probs[2, 2, [0, 4]] = 0.5  # cell (0, 0) vs own cell (1, 1)
    a = AssociationMap(probs, g)
    first = hard_assign(a).labels
    assert first[2, 2] == 0
    assert np.array_equal(first, hard_assign(a).labels)


def test_hard_assign_matches_argmax_loop():
    g = GridSpec(6, 6, 2)
    a = AssociationMap.random(g, np.random.default_rng(0))
    idx = neighbor_index_map(g)
    labels = hard_assign(a).labels
    for y in range(6):
        for x in range(6):
            k = max(range(9), key=lambda c: (a.probs[y, x, c], -c))
            assert labels[y, x] == idx[k, y, x]


def test_hard_assign_invariant_to_monotone_transform():
    g = GridSpec(12, 12, 4)
    a = AssociationMap.random(g, np.random.default_rng(1))
    warped = AssociationMap(np.sqrt(a.probs) * 3 + 0.0, g)
    np.testing.assert_array_equal(hard_assign(a).labels, hard_assign(warped).labels)


def test_locality_bound_3s_box():
    rng = np.random.default_rng(2)
    g = GridSpec(40, 56, 8)
    labels = hard_assign(AssociationMap.random(g, rng, scale=5.0)).labels
    for lab in np.unique(labels):
        ci, cj = divmod(int(lab), g.grid_width)
        ys, xs = np.nonzero(labels == lab)
        assert (np.abs(ys // 8 - ci) <= 1).all() and (np.abs(xs // 8 - cj) <= 1).all()
        assert ys.max() - ys.min() < 24 and xs.max() - xs.min() < 24


def test_compact_labels_raster_order():
    labels, n = compact_labels(np.array([[7, 7, 3], [9, 3, 3]]))
    assert n == 3
    np.testing.assert_array_equal(labels, [[0, 0, 1], [2, 1, 1]])
    assert LabelMap.from_array([[4, 2]]).compact().n_labels == 2


def test_label_map_rejects_negative():
    with pytest.raises(ValueError):
        LabelMap.from_array([[0, -1]])


def test_connected_regions_splits_disconnected_label():
    labels = np.array([[0, 1, 0], [0, 1, 0]])
    comp, n = connected_regions(labels)
    assert n == 3
    assert comp[0, 0] != comp[0, 2]


def test_connected_partition_unchanged():
    labels = np.repeat(np.repeat(np.arange(9).reshape(3, 3), 4, 0), 4, 1)
    out = enforce_connectivity(labels, 4)
    np.testing.assert_array_equal(out.labels, labels)
    assert out.n_labels == 9


def test_isolated_pixel_merges_into_surrounding_label():
    labels = np.zeros((6, 6), dtype=np.int64)
    labels[:, 3:] = 1
    labels[2, 1] = 1  # orphan inside label 0
    out = enforce_connectivity(labels, 4)
    assert out.n_labels == 2
    assert out.labels[2, 1] == out.labels[0, 0]


def test_single_label_returned_unchanged():
    out = enforce_connectivity(np.full((5, 5), 3), 4)
    assert out.n_labels == 1
    assert (out.labels == 0).all()


def test_merge_prefers_longest_shared_boundary():
    labels = np.array(
        [
            [0, 0, 0, 0],
            [0, 2, 2, 1],
            [1, 1, 1, 1],
        ]
    )
    # the 2-pixel component 2 touches label 0 along 3 edges and label 1 along 3 edges -> tie -> smaller id
    out = enforce_connectivity(labels, 4, min_size_fraction=0.2)
    assert out.labels[1, 1] == out.labels[0, 0]


@pytest.mark.parametrize("seed", range(5))
def test_random_maps_have_no_small_or_split_labels(seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(32, 32, 8)
    raw = hard_assign(AssociationMap.random(g, rng, scale=6.0)).labels
    before = flood_fill_components(raw)[1].size
    out = enforce_connectivity(raw, 8).labels
    comp, sizes = flood_fill_components(out)
    assert sizes.size <= before
    assert sizes.min() >= 0.25 * 64
    assert sizes.size == np.unique(out).size  # one component per label
    assert set(np.unique(out)) == set(range(sizes.size))


def test_overlay_single_label_unchanged():
    img = np.random.default_rng(3).random((4, 5, 3))
    np.testing.assert_array_equal(overlay_boundaries(img, np.zeros((4, 5), int)), img)


def test_overlay_block_partition_marks_cross():
    labels = np.repeat(np.repeat(np.arange(4).reshape(2, 2), 2, 0), 2, 1)
    img = np.zeros((4, 4, 3))
    out = overlay_boundaries(img, labels)
    marked = (out == [1.0, 0.0, 0.0]).all(axis=-1)
    expected = np.ones((4, 4), bool)
    for y, x in ((0, 0), (0, 3), (3, 0), (3, 3)):
        expected[y, x] = False
    np.testing.assert_array_equal(marked, expected)
    np.testing.assert_array_equal(boundary_mask(labels), expected)


def test_overlay_is_idempotent():
    rng = np.random.default_rng(4)
    img = rng.random((8, 8, 3))
    labels = rng.integers(0, 3, size=(8, 8))
    once = overlay_boundaries(img, labels)
    np.testing.assert_array_equal(overlay_boundaries(once, labels), once)


def test_large_fragments_do_not_add_labels():
    # label 0 is cut into two big pieces by label 1; the smaller (left) piece is absorbed
    labels = np.zeros((8, 12), dtype=np.int64)
    labels[:, 4:6] = 1
    out = enforce_connectivity(labels, 2)
    assert out.n_labels == 2
    assert (out.labels[:, :6] == out.labels[0, 0]).all()
    assert (out.labels[:, 6:] != out.labels[0, 0]).all()


@pytest.mark.parametrize("seed", range(3))
def test_label_count_never_exceeds_input(seed):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 20, size=(24, 24))
    assert enforce_connectivity(raw, 4).n_labels <= 20
