import math

import numpy as np
import pytest

from gridpix.grid import OFFSETS, AssociationMap, GridSpec, valid_mask
from gridpix.losses import LossConfig, general_loss, joint_loss, semantic_loss, slic_loss, smooth_l1
from gridpix.tensor import Tensor, backward, softmax_channels

from oracles import direct_centers, direct_reconstruct


def oracle_general_loss(assoc, feats, dist, m, cell, eps=1e-10):
    """Summed loss from loop-based centers and reconstruction."""
    h, w, c = feats.shape
    ys, xs = np.mgrid[0:h, 0:w]
    full = np.concatenate([feats, xs[..., None], ys[..., None]], axis=-1)
    props, _ = direct_centers(assoc, full)
    rec, _ = direct_reconstruct(assoc, props, props[..., c:])
    f_rec, p_rec = rec[..., :c], rec[..., c:]
    if dist == "l2":
        prop = np.sqrt(((feats - f_rec) ** 2).sum(-1)).sum()
    else:
        prop = -(feats * np.log(f_rec * (1 - eps) + eps)).sum()
    pos = np.sqrt(((full[..., c:] - p_rec) ** 2).sum(-1)).sum()
    return prop, m / cell * pos


def summed(m=0.003, cell=2, **kw):
    return LossConfig(m=m, cell=cell, reduction="sum", **kw)


def test_config_defaults_and_validation():
    cfg = LossConfig()
    assert cfg.alphas == (0.5, 0.7, 1.0) and cfg.lam == 0.1 and cfg.m == 0.003
    assert LossConfig(m=30).m == 30
    for bad in ({"m": -1}, {"cell": 1}, {"lam": -0.1}, {"reduction": "max"}):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_unknown_distance_rejected():
    g = GridSpec(4, 4, 2)
    with pytest.raises(ValueError, match="unknown distance"):
        general_loss(AssociationMap.hard(g), np.zeros((4, 4, 1)), "l1", summed())


def test_constant_image_hard_q_position_term():
    g = GridSpec(4, 4, 2)
    t = general_loss(AssociationMap.hard(g), np.full((4, 4, 3), 5.0), "l2", summed(m=0.5))
    assert t.property.item() == pytest.approx(0.0, abs=1e-12)
    # every pixel sits (0.5, 0.5) away from its block centroid
    assert t.position.item() == pytest.approx(0.5 / 2 * 16 * math.sqrt(0.5))


def test_m_zero_is_pure_property_term():
    g = GridSpec(6, 6, 2)
    rng = np.random.default_rng(0)
    a = AssociationMap.random(g, rng)
    feats = rng.normal(size=(6, 6, 3))
    t = general_loss(a, feats, "l2", summed(m=0.0))
    assert t.position.item() == 0.0
    assert t.total.item() == t.property.item()


@pytest.mark.parametrize("dist", ["l2", "cross_entropy"])
def test_random_6x6_matches_loop_oracle(dist):
    g = GridSpec(6, 6, 2)
    rng = np.random.default_rng(1)
    a = AssociationMap.random(g, rng)
    if dist == "l2":
        feats = rng.normal(size=(6, 6, 3))
    else:
        feats = np.eye(3)[rng.integers(0, 3, size=(6, 6))]
    t = general_loss(a, feats, dist, summed(m=0.7))
    prop, pos = oracle_general_loss(a, feats, dist, 0.7, 2)
    assert t.property.item() == pytest.approx(prop, abs=1e-5)
    assert t.position.item() == pytest.approx(pos, abs=1e-5)


@pytest.mark.parametrize("kind", ["slic", "semantic"])
def test_loss_gradient_wrt_logits(kind):
    from gridpix.gradcheck import check_gradient

    rng = np.random.default_rng(2)
    mask = valid_mask(GridSpec(6, 6, 2))[None]
    if kind == "slic":
        feats = Tensor(rng.uniform(0, 100, size=(1, 3, 6, 6)))
        fn = slic_loss
    else:
        feats = Tensor(np.eye(3)[rng.integers(0, 3, size=(6, 6))].transpose(2, 0, 1)[None])
        fn = semantic_loss
    cfg = LossConfig(m=0.5, cell=2)
    err = check_gradient(lambda x: fn(softmax_channels(x, mask), feats, cfg).total, rng.normal(size=(1, 9, 6, 6)), rng)
    assert err < 1e-3


def test_flat_lab_image_hard_q_has_zero_color_term():
    g = GridSpec(8, 8, 4)
    t = slic_loss(AssociationMap.hard(g), np.broadcast_to([53.4, 0.0, 0.0], (8, 8, 3)), LossConfig(cell=4))
    assert t.property.item() == pytest.approx(0.0, abs=1e-12)


def test_two_region_image_aligned_to_cells():
    g = GridSpec(4, 4, 2)
    lab = np.zeros((4, 4, 3))
    lab[:, 2:, 0] = 100.0
    t = slic_loss(AssociationMap.hard(g), lab, summed(m=1.0))
    prop, pos = oracle_general_loss(AssociationMap.hard(g), lab, "l2", 1.0, 2)
    assert t.property.item() == pytest.approx(0.0, abs=1e-12) and prop == pytest.approx(0.0, abs=1e-12)
    assert t.position.item() == pytest.approx(pos)


def test_semantic_pure_cells_hard_q_is_zero():
    g = GridSpec(8, 8, 2)
    labels = np.repeat(np.repeat(np.random.default_rng(3).integers(0, 4, size=(4, 4)), 2, 0), 2, 1)
    t = semantic_loss(AssociationMap.hard(g), np.eye(4)[labels], LossConfig(cell=2))
    assert 0 <= t.property.item() < 1e-6


def test_semantic_half_half_centers_give_ln2():
    g = GridSpec(8, 8, 2)
    labels = np.tile([0, 1], (8, 4))  # every 2x2 cell holds one pixel column of each class
    t = semantic_loss(AssociationMap.uniform(g), np.eye(2)[labels], LossConfig(cell=2))
    assert t.property.item() == pytest.approx(math.log(2), abs=1e-6)


def test_reduction_mean_is_sum_over_pixels():
    g = GridSpec(6, 6, 2)
    rng = np.random.default_rng(4)
    a = AssociationMap.random(g, rng)
    feats = rng.normal(size=(6, 6, 3))
    s = slic_loss(a, feats, LossConfig(cell=2, reduction="sum")).total.item()
    m = slic_loss(a, feats, LossConfig(cell=2)).total.item()
    assert m == pytest.approx(s / 36)


def test_position_term_linear_in_m():
    g = GridSpec(6, 6, 2)
    rng = np.random.default_rng(5)
    a = AssociationMap.random(g, rng)
    feats = rng.normal(size=(6, 6, 3))
    one = slic_loss(a, feats, LossConfig(m=0.4, cell=2))
    two = slic_loss(a, feats, LossConfig(m=0.8, cell=2))
    assert two.position.item() == pytest.approx(2 * one.position.item(), rel=1e-12)
    assert two.property.item() == one.property.item()


def test_losses_nonnegative_and_finite():
    rng = np.random.default_rng(6)
    for _ in range(5):
        g = GridSpec(8, 10, 3)
        a = AssociationMap.random(g, rng, scale=5.0)
        for t in (
            slic_loss(a, rng.uniform(0, 100, size=(8, 10, 3)), LossConfig(cell=3)),
            semantic_loss(a, np.eye(3)[rng.integers(0, 3, size=(8, 10))], LossConfig(cell=3)),
        ):
            assert np.isfinite(t.total.item()) and t.total.item() >= 0


def test_slic_loss_invariant_under_mirrored_cell_labels():
    g = GridSpec(8, 12, 4)
    rng = np.random.default_rng(7)
    a = AssociationMap.random(g, rng)
    lab = rng.uniform(0, 100, size=(8, 12, 3))
    perm = [OFFSETS.index((di, -dj)) for di, dj in OFFSETS]
    mirrored = AssociationMap(a.probs[:, ::-1][..., perm].copy(), g)
    base = slic_loss(a, lab, LossConfig(cell=4)).total.item()
    flipped = slic_loss(mirrored, lab[:, ::-1], LossConfig(cell=4)).total.item()
    assert flipped == pytest.approx(base, rel=1e-12)


# -- smooth L1 and the joint loss -------------------------------------------------------------


def test_smooth_l1_values_and_continuity():
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(0.5) == 0.125
    assert smooth_l1(2.0) == 1.5
    assert smooth_l1(1.0) == 0.5 and smooth_l1(1.0 - 1e-12) == pytest.approx(0.5)
    x = Tensor(np.array([1.0 - 1e-9, 1.0 + 1e-9, -1.0 + 1e-9]), requires_grad=True)
    backward(smooth_l1(x).sum(), [x])
    np.testing.assert_allclose(x.grad, [1.0, 1.0, -1.0], atol=1e-8)


def _stages(value, shape=(1, 1, 4, 4)):
    return [Tensor(np.full(shape, value)) for _ in range(3)]


def test_joint_loss_perfect_prediction_is_zero():
    gt = np.full((1, 1, 4, 4), 3.0)
    loss = joint_loss(_stages(3.0), gt, np.ones_like(gt, bool), None, None, LossConfig(lam=0.0))
    assert loss.item() == 0.0


def test_joint_loss_constant_error_two():
    gt = np.zeros((1, 1, 4, 4))
    loss = joint_loss(_stages(2.0), gt, np.ones_like(gt, bool), None, None, LossConfig(lam=0.0))
    assert loss.item() == pytest.approx(3.3)


def test_joint_loss_rejects_empty_mask():
    gt = np.zeros((1, 1, 4, 4))
    with pytest.raises(ValueError, match="empty"):
        joint_loss(_stages(1.0), gt, np.zeros_like(gt, bool), None, None, LossConfig(lam=0.0))


def test_joint_loss_with_slic_term_matches_oracle():
    rng = np.random.default_rng(8)
    g = GridSpec(8, 8, 2)
    a = AssociationMap.random(g, rng)
    lab = rng.uniform(0, 100, size=(8, 8, 3))
    gt = rng.uniform(0, 20, size=(1, 1, 8, 8))
    valid = rng.random((1, 1, 8, 8)) < 0.7
    preds = [gt + rng.normal(scale=s, size=gt.shape) for s in (3.0, 1.0, 0.3)]
    cfg = LossConfig(m=1.0, cell=2, lam=0.1)
    q = a.to_tensor()
    lab_t = Tensor(lab.transpose(2, 0, 1)[None].copy())
    loss = joint_loss([Tensor(p) for p in preds], gt, valid, q, lab_t, cfg).item()
    n = valid.sum()
    expected = sum(alpha * smooth_l1(p - gt)[valid].sum() / n for alpha, p in zip(cfg.alphas, preds))
    prop, pos = oracle_general_loss(a, lab, "l2", 1.0, 2)
    expected += 0.1 / n * (prop + pos)
    assert loss == pytest.approx(expected, abs=1e-5)
