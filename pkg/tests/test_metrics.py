import csv
import itertools
import math

import numpy as np
import pytest

from gridpix.io import write_labels
from gridpix.metrics import (
    aggregate,
    asa,
    boundary_recall_precision,
    boundary_tolerance,
    compactness,
    evaluate,
    evaluate_directory,
)
from gridpix.segmentation import boundary_mask

from oracles import brute_asa, brute_boundaries, brute_compactness, brute_recall


def _random_pair(rng, shape, n_pred, n_gt):
    return rng.integers(0, n_pred, size=shape), rng.integers(0, n_gt, size=shape)


# -- ASA ------------------------------------------------------------------------------------


def test_asa_identical_is_one():
    gt = np.random.default_rng(0).integers(0, 5, size=(8, 8))
    assert asa(gt, gt) == 1.0


def test_asa_single_superpixel_on_half_half():
    gt = np.zeros((4, 6), int)
    gt[:, 3:] = 1
    assert asa(np.zeros_like(gt), gt) == 0.5


def test_asa_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        asa(np.zeros((3, 4)), np.zeros((4, 3)))


@pytest.mark.parametrize("seed", range(4))
def test_asa_matches_contingency_oracle_8x8(seed):
    pred, gt = _random_pair(np.random.default_rng(seed), (8, 8), 6, 4)
    assert asa(pred, gt) == brute_asa(pred, gt)


def test_asa_invariant_to_label_permutation():
    rng = np.random.default_rng(1)
    pred, gt = _random_pair(rng, (16, 16), 10, 4)
    perm_p, perm_g = rng.permutation(10) + 100, rng.permutation(4) * 7
    assert asa(perm_p[pred], perm_g[gt]) == asa(pred, gt)


def test_asa_is_one_for_refinements():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 3, size=(12, 12))
    refined = gt * 100 + rng.integers(0, 5, size=gt.shape)  # each superpixel inside one gt segment
    assert asa(refined, gt) == 1.0


# -- boundaries --------------------------------------------------------------------------


def test_tolerance_for_481x321_is_one():
    assert math.hypot(481, 321) == pytest.approx(578.3, abs=0.05)
    assert boundary_tolerance(321, 481) == 1
    assert boundary_tolerance(64, 64) == 0


def test_identical_maps_score_one():
    gt = np.random.default_rng(3).integers(0, 4, size=(10, 10))
    assert boundary_recall_precision(gt, gt, 0) == (1.0, 1.0)


def test_shifted_vertical_boundary():
    gt = np.zeros((8, 10), int)
    gt[:, 5:] = 1
    pred = np.zeros_like(gt)
    pred[:, 6:] = 1
    assert boundary_recall_precision(pred, gt, 1) == (1.0, 1.0)
    br, bp = boundary_recall_precision(pred, gt, 0)
    assert br < 1 and bp < 1


def test_no_gt_boundary_flagged():
    flags = []
    br, _ = boundary_recall_precision(np.arange(16).reshape(4, 4), np.zeros((4, 4)), 0, flags)
    assert br == 1.0 and "no ground-truth boundary" in flags


def test_boundary_mask_matches_brute_force():
    labels = np.random.default_rng(4).integers(0, 3, size=(9, 7))
    np.testing.assert_array_equal(boundary_mask(labels), brute_boundaries(labels))


def _check_br_bp(pred, gt, tol):
    pb, gb = brute_boundaries(pred), brute_boundaries(gt)
    br, bp = boundary_recall_precision(pred, gt, tol)
    assert br == brute_recall(gb, pb, tol)
    assert bp == brute_recall(pb, gb, tol)


def test_brbp_exhaustive_6x6_two_label_columns():
    # every pair of single-cut partitions (vertical or horizontal cut at any position)
    maps = []
    for k in range(1, 6):
        v = np.zeros((6, 6), int)
        v[:, k:] = 1
        maps += [v, v.T.copy()]
    for pred, gt in itertools.product(maps, repeat=2):
        for tol in (0, 1, 2):
            _check_br_bp(pred, gt, tol)


@pytest.mark.parametrize("seed", range(3))
def test_brbp_random_16x16_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = np.repeat(np.repeat(rng.integers(0, 6, size=(8, 8)), 2, 0), 2, 1)
    gt = np.repeat(np.repeat(rng.integers(0, 3, size=(4, 4)), 4, 0), 4, 1)
    for tol in (0, 1, 2):
        _check_br_bp(pred, gt, tol)


def test_brbp_monotone_in_tolerance():
    rng = np.random.default_rng(5)
    pred, gt = _random_pair(rng, (16, 16), 5, 3)
    scores = [boundary_recall_precision(pred, gt, t) for t in range(4)]
    for a, b in zip(scores, scores[1:]):
        assert b[0] >= a[0] and b[1] >= a[1]


# -- compactness ------------------------------------------------------------------------------


def test_single_square_label_is_pi_over_four():
    assert compactness(np.zeros((7, 7), int)) == pytest.approx(math.pi / 4, abs=1e-12)


def test_square_tiling_is_pi_over_four():
    tiles = np.repeat(np.repeat(np.arange(16).reshape(4, 4), 5, 0), 5, 1)
    assert compactness(tiles) == pytest.approx(math.pi / 4, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_compactness_matches_counting_oracle(seed):
    labels = np.random.default_rng(seed).integers(0, 4, size=(8, 8))
    assert compactness(labels) == pytest.approx(brute_compactness(labels), abs=1e-9)


def test_compactness_exhaustive_6x6_and_random_16x16():
    rng = np.random.default_rng(6)
    for _ in range(3):
        small = rng.integers(0, 3, size=(6, 6))
        big = np.repeat(np.repeat(rng.integers(0, 5, size=(8, 8)), 2, 0), 2, 1)
        assert abs(compactness(small) - brute_compactness(small)) < 1e-9
        assert abs(compactness(big) - brute_compactness(big)) < 1e-9


def test_compactness_invariant_to_permutation_and_translation():
    rng = np.random.default_rng(7)
    labels = np.repeat(np.repeat(rng.integers(0, 4, size=(3, 3)), 3, 0), 3, 1)
    assert compactness(rng.permutation(4)[labels] + 10) == pytest.approx(compactness(labels), abs=1e-12)
    # translate the labelling inside a larger constant frame
    a = np.full((14, 14), 99)
    b = np.full((14, 14), 99)
    a[1:10, 2:11] = labels
    b[4:13, 3:12] = labels
    assert compactness(a) == pytest.approx(compactness(b), abs=1e-12)


def test_all_scores_in_unit_interval():
    rng = np.random.default_rng(8)
    pred, gt = _random_pair(rng, (20, 20), 8, 3)
    r = evaluate(pred, gt)
    for v in (r.asa, r.br, r.bp, r.co):
        assert 0.0 <= v <= 1.0


# -- directory evaluation ------------------------------------------------------------------------


def test_identical_directories_give_perfect_rows(tmp_path):
    rng = np.random.default_rng(9)
    for stem in ("a", "b"):
        write_labels(tmp_path / f"{stem}.pgm", rng.integers(0, 5, size=(12, 12)))
    out = tmp_path / "report.csv"
    rows, missing = evaluate_directory(tmp_path, tmp_path, out)
    assert missing == [] and [s for s, _ in rows] == ["a", "b"]
    assert all(r.asa == r.br == r.bp == 1.0 for _, r in rows)
    with open(out) as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == ["image", "n_superpixels", "asa", "br", "bp", "co", "tolerance_px"]
    assert lines[3] == []


def test_empty_intersection_rejected(tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    write_labels(tmp_path / "p" / "x.pgm", np.zeros((4, 4), int))
    write_labels(tmp_path / "g" / "y.pgm", np.zeros((4, 4), int))
    with pytest.raises(ValueError, match="no common"):
        evaluate_directory(tmp_path / "p", tmp_path / "g")


def test_aggregate_is_mean_of_rows():
    rng = np.random.default_rng(10)
    rows = []
    for stem in ("a", "b"):
        pred, gt = _random_pair(rng, (10, 10), 4, 2)
        rows.append((stem, evaluate(pred, gt, 1)))
    overall = aggregate(rows)[-1]
    assert overall["bucket"] == "all" and overall["count"] == 2
    for key in ("asa", "br", "bp", "co"):
        assert overall[key] == pytest.approx((getattr(rows[0][1], key) + getattr(rows[1][1], key)) / 2)
