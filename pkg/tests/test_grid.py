import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridpix.grid import (
    OFFSETS,
    AssociationMap,
    GridSpec,
    compute_centers,
    csp_centers,
    csp_kernel,
    neighbor_index_map,
    neighborhood,
    reconstruct,
    valid_mask,
)

from oracles import direct_centers, direct_reconstruct


# -- GridSpec / neighborhood ------------------------------------------------------


def test_gridspec_dimensions_and_owner():
    g = GridSpec(10, 7, 3)
    assert (g.grid_height, g.grid_width, g.n_cells) == (4, 3, 12)
    assert g.owner(6, 9) == (3, 2)
    with pytest.raises(ValueError):
        GridSpec(8, 8, 1)


def test_every_pixel_has_one_owner():
    g = GridSpec(9, 11, 4)
    owners = g.owner_index_map()
    for y in range(9):
        for x in range(11):
            i, j = g.owner(x, y)
            assert owners[y, x] == i * g.grid_width + j == (y // 4) * g.grid_width + x // 4


def test_interior_neighborhood():
    g = GridSpec(16, 16, 2)  # 8x8 grid
    cells, valid = neighborhood(7, 6, g)  # owner (3, 3)
    assert all(valid)
    assert cells == [(i, j) for i in (2, 3, 4) for j in (2, 3, 4)]


def test_corner_neighborhood():
    g = GridSpec(16, 16, 2)
    cells, valid = neighborhood(0, 1, g)
    assert sum(valid) == 4
    assert [c for c, ok in zip(cells, valid) if ok] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_neighborhood_rejects_outside_pixel():
    with pytest.raises(ValueError):
        neighborhood(6, 0, GridSpec(6, 6, 2))


def test_exhaustive_locality_6x6_s2():
    g = GridSpec(6, 6, 2)
    for y in range(6):
        for x in range(6):
            oi, oj = g.owner(x, y)
            cells, valid = neighborhood(x, y, g)
            for (ci, cj), ok in zip(cells, valid):
                assert abs(ci - oi) <= 1 and abs(cj - oj) <= 1
                assert ok == (0 <= ci < 3 and 0 <= cj < 3)


def test_channel_order_is_row_major_offsets():
    assert OFFSETS[0] == (-1, -1) and OFFSETS[4] == (0, 0) and OFFSETS[8] == (1, 1)
    g = GridSpec(8, 8, 2)
    idx = neighbor_index_map(g)
    mask = valid_mask(g)
    assert ((idx >= 0) == mask).all()
    assert idx[4, 5, 6] == (5 // 2) * 4 + 6 // 2


# -- AssociationMap ------------------------------------------------------------------


def test_random_assoc_invariants():
    g = GridSpec(10, 13, 3)
    a = AssociationMap.random(g, np.random.default_rng(0))
    a.check()
    assert (a.probs >= 0).all() and (a.probs <= 1).all()
    assert (a.probs[~valid_mask(g).transpose(1, 2, 0)] == 0).all()


def test_assoc_check_rejects_mass_off_grid():
    g = GridSpec(4, 4, 2)
    probs = np.full((4, 4, 9), 1 / 9)
    with pytest.raises(ValueError):
        AssociationMap(probs, g).check()


# -- compute_centers ------------------------------------------------------------------


def test_constant_features_give_constant_centers():
    g = GridSpec(8, 10, 2)
    a = AssociationMap.random(g, np.random.default_rng(1))
    feats = np.broadcast_to([3.0, -1.0], (8, 10, 2))
    np.testing.assert_allclose(compute_centers(a, feats).properties, np.broadcast_to([3.0, -1.0], (4, 5, 2)))


def test_hard_assoc_block_average_and_centroid():
    g = GridSpec(6, 6, 2)
    feats = np.random.default_rng(2).normal(size=(6, 6, 3))
    c = compute_centers(AssociationMap.hard(g), feats)
    blocks = feats.reshape(3, 2, 3, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(c.properties, blocks)
    xs = np.array([0.5, 2.5, 4.5])
    np.testing.assert_allclose(c.locations[..., 0], np.broadcast_to(xs, (3, 3)))
    np.testing.assert_allclose(c.locations[..., 1], np.broadcast_to(xs[:, None], (3, 3)))


def test_compute_centers_matches_direct_loop():
    g = GridSpec(6, 6, 2)
    rng = np.random.default_rng(3)
    a = AssociationMap.random(g, rng)
    feats = rng.normal(size=(6, 6, 3))
    props, locs = direct_centers(a, feats)
    c = compute_centers(a, feats)
    np.testing.assert_allclose(c.properties, props, atol=1e-5)
    np.testing.assert_allclose(c.locations, locs, atol=1e-5)


def test_centers_on_partial_cells_match_direct_loop():
    g = GridSpec(7, 9, 4)
    rng = np.random.default_rng(4)
    a = AssociationMap.random(g, rng)
    feats = rng.normal(size=(7, 9, 2))
    props, locs = direct_centers(a, feats)
    c = compute_centers(a, feats)
    np.testing.assert_allclose(c.properties, props, atol=1e-9)
    np.testing.assert_allclose(c.locations, locs, atol=1e-9)


def test_location_centers_inside_image_and_3s_box():
    g = GridSpec(12, 16, 4)
    a = AssociationMap.random(g, np.random.default_rng(5), scale=4.0)
    c = compute_centers(a, np.zeros((12, 16, 1)))
    x, y = c.locations[..., 0], c.locations[..., 1]
    assert (x >= 0).all() and (x <= 15).all() and (y >= 0).all() and (y <= 11).all()
    i, j = np.mgrid[0:3, 0:4]
    assert ((x >= (j - 1) * 4) & (x < (j + 2) * 4)).all()
    assert ((y >= (i - 1) * 4) & (y < (i + 2) * 4)).all()


def test_degenerate_cell_falls_back_to_block_mean():
    g = GridSpec(4, 4, 2)
    probs = np.zeros((4, 4, 9))
    probs[..., 4] = 1.0
    # move all of cell (0, 0)'s pixels to their right neighbour
    probs[:2, :2, 4] = 0.0
    probs[:2, :2, 5] = 1.0
    feats = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    c = compute_centers(AssociationMap(probs, g), feats)
    assert c.degenerate[0, 0] and not c.degenerate[1, 1]
    assert c.properties[0, 0, 0] == pytest.approx(feats[:2, :2].mean())
    np.testing.assert_allclose(c.locations[0, 0], [0.5, 0.5])


# -- reconstruct ----------------------------------------------------------------------


def test_reconstruct_constant_image():
    g = GridSpec(8, 8, 4)
    a = AssociationMap.random(g, np.random.default_rng(6))
    feats = np.full((8, 8, 3), 7.0)
    f, _ = reconstruct(a, compute_centers(a, feats))
    np.testing.assert_allclose(f, 7.0)


def test_reconstruct_hard_cellwise_constant_is_exact():
    g = GridSpec(6, 8, 2)
    values = np.random.default_rng(7).normal(size=(3, 4, 2))
    feats = np.repeat(np.repeat(values, 2, axis=0), 2, axis=1)
    a = AssociationMap.hard(g)
    f, _ = reconstruct(a, compute_centers(a, feats))
    np.testing.assert_allclose(f, feats, atol=1e-12)


def test_reconstruct_matches_per_pixel_sum():
    g = GridSpec(9, 7, 3)
    rng = np.random.default_rng(8)
    a = AssociationMap.random(g, rng)
    c = compute_centers(a, rng.normal(size=(9, 7, 4)))
    f, p = reconstruct(a, c)
    f_ref, p_ref = direct_reconstruct(a, c.properties, c.locations)
    np.testing.assert_allclose(f, f_ref, atol=1e-6)
    np.testing.assert_allclose(p, p_ref, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(h=st.integers(4, 14), w=st.integers(4, 14), cell=st.integers(2, 5), seed=st.integers(0, 2**31 - 1))
def test_reconstruction_is_convex_combination(h, w, cell, seed):
    g = GridSpec(h, w, cell)
    rng = np.random.default_rng(seed)
    a = AssociationMap.random(g, rng)
    c = compute_centers(a, rng.normal(size=(h, w, 2)))
    f, _ = reconstruct(a, c)
    idx = neighbor_index_map(g).transpose(1, 2, 0)
    props = c.properties.reshape(-1, 2)
    for y in range(h):
        for x in range(w):
            used = [k for k in range(9) if a.probs[y, x, k] > 0]
            vals = props[idx[y, x, used]]
            assert (f[y, x] >= vals.min(axis=0) - 1e-9).all()
            assert (f[y, x] <= vals.max(axis=0) + 1e-9).all()


# -- CSP form -----------------------------------------------------------------------------


def test_csp_equals_compute_on_hard_assoc():
    g = GridSpec(6, 6, 2)
    feats = np.random.default_rng(9).normal(size=(6, 6, 3))
    a = AssociationMap.hard(g)
    scatter = compute_centers(a, feats)
    gather = csp_centers(a, feats)
    np.testing.assert_allclose(gather.properties, scatter.properties, rtol=0, atol=1e-14)
    np.testing.assert_allclose(gather.locations, scatter.locations, rtol=0, atol=1e-14)


def test_csp_equals_compute_random_12x12_s4():
    g = GridSpec(12, 12, 4)
    rng = np.random.default_rng(10)
    a = AssociationMap.random(g, rng)
    feats = rng.normal(size=(12, 12, 3))
    scatter, gather = compute_centers(a, feats), csp_centers(a, feats)
    assert np.abs(gather.properties - scatter.properties).max() < 1e-6
    assert np.abs(gather.locations - scatter.locations).max() < 1e-6


def test_csp_kernel_uniform_assoc_is_uniform_over_contributors():
    g = GridSpec(20, 20, 4)
    a = AssociationMap.uniform(g)
    kernel, _ = csp_kernel(a, 2, 2)  # every pixel in this window has 9 valid neighbours
    assert kernel.shape == (12, 12)
    assert kernel.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(kernel, 1 / 144)


def test_csp_kernel_weights_are_normalized_at_border():
    g = GridSpec(10, 10, 4)
    a = AssociationMap.random(g, np.random.default_rng(11))
    for i in range(g.grid_height):
        for j in range(g.grid_width):
            kernel, _ = csp_kernel(a, i, j)
            assert kernel.sum() == pytest.approx(1.0)
            assert (kernel >= 0).all()
