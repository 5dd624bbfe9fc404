"""Finite-difference checks of every differentiable operator.

Each check builds a scalar function of one float64 input, compares the
analytic gradient from :func:`gridpix.tensor.backward` with central
differences on randomly chosen coordinates, and reports the largest
relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .grid import GridSpec, reconstruct_pixels, superpixel_centers, valid_mask
from .losses import LossConfig, joint_loss, semantic_loss, slic_loss, smooth_l1

DEFAULT_COORDS = 20
DEFAULT_STEP = 1e-6
# network losses are O(10-100); a larger step keeps cancellation error well below small gradients.
# When the stencil crosses an activation kink the step shrinks by 10x, up to NETWORK_SHRINKS times.
NETWORK_STEP = 1e-5
# loss-level checks are smooth in the logits but their values are O(10), so they also get a larger step
LOSS_STEP = 1e-4
LOSS_CHECKS = ("slic_loss", "semantic_loss", "joint_loss_assoc")
NETWORK_SHRINKS = 2
# gradients smaller than this in magnitude are compared absolutely
ABS_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_coords: int
    n_skipped: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-3


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradient(
    fn: Callable[[T.Tensor], T.Tensor],
    x0: np.ndarray,
    rng: np.random.Generator,
    n_coords: int = DEFAULT_COORDS,
    step: float = DEFAULT_STEP,
) -> float:
    """Max relative error between analytic and central-difference gradients of ``fn`` at ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = T.Tensor(x0.copy(), requires_grad=True)
    T.backward(fn(x), [x])
    analytic = x.grad
    coords = rng.choice(x0.size, size=min(n_coords, x0.size), replace=False)
    worst = 0.0
    for flat in coords:
        idx = np.unravel_index(flat, x0.shape)
        plus, minus = x0.copy(), x0.copy()
        plus[idx] += step
        minus[idx] -= step
        f_plus = float(fn(T.Tensor(plus)).data)
        f_minus = float(fn(T.Tensor(minus)).data)
        numeric = (f_plus - f_minus) / (2 * step)
        worst = max(worst, relative_error(float(analytic[idx]), numeric))
    return worst


def _projector(rng, shape):
    """Random weights so that sum(w * y) exercises every output element."""
    w = rng.normal(size=shape)
    return lambda y: (y * w).sum()


def operator_checks(rng: np.random.Generator) -> dict:
    """Name -> (function of one Tensor returning a scalar, starting point)."""
    checks = {}

    def add(name, fn, x0):
        checks[name] = (fn, x0)

    shape = (2, 3, 4, 5)
    other = rng.normal(size=shape)
    positive = rng.uniform(0.5, 2.0, size=shape)
    p = _projector(rng, shape)
    q_shape = (2, 9, 8, 12)
    p_2_4_5 = _projector(rng, (2, 4, 5))
    p_2_2_2_5 = _projector(rng, (2, 2, 2, 5))
    p_2_6_4_5 = _projector(rng, (2, 6, 4, 5))
    p_2_3_7_6 = _projector(rng, (2, 3, 7, 6))
    p_2_4_3_4 = _projector(rng, (2, 4, 3, 4))
    p_2_4_6_7 = _projector(rng, (2, 4, 6, 7))
    p_2_2_12_14 = _projector(rng, (2, 2, 12, 14))
    p_q = _projector(rng, q_shape)
    p_2_3_2_2 = _projector(rng, (2, 3, 2, 2))
    p_2_3_2_3 = _projector(rng, (2, 3, 2, 3))
    p_2_3_8_12 = _projector(rng, (2, 3, 8, 12))
    add("add", lambda x: p(x + other), rng.normal(size=shape))
    add("sub", lambda x: p(other - x), rng.normal(size=shape))
    add("mul", lambda x: p(x * other), rng.normal(size=shape))
    add("div", lambda x: p(other / x), positive)
    add("pow", lambda x: p(x**3), rng.normal(size=shape))
    add("exp", lambda x: p(x.exp()), rng.normal(size=shape))
    add("log", lambda x: p(x.log()), positive)
    add("sqrt", lambda x: p(x.sqrt()), positive)
    add("abs", lambda x: p(x.abs()), rng.normal(size=shape))
    add("sum_axis", lambda x: p_2_4_5(x.sum(axis=1)), rng.normal(size=shape))
    add("mean", lambda x: (x * x).mean(), rng.normal(size=shape))
    add("reshape_transpose", lambda x: p(x.reshape(2, 3, 20).transpose(0, 2, 1).reshape(shape)), rng.normal(size=shape))
    add("getitem", lambda x: p_2_2_2_5(x[:, 1:3, ::2]), rng.normal(size=shape))
    add("leaky_relu", lambda x: p(T.leaky_relu(x, 0.1)), rng.normal(size=shape))
    add("concat", lambda x: p_2_6_4_5(T.concat([x, x * 2.0], axis=1)), rng.normal(size=shape))
    add("pad2d", lambda x: p_2_3_7_6(T.pad2d(x, 1, 2, 0, 1)), rng.normal(size=shape))
    add("norm", lambda x: p(T.norm(x, axis=1)[:, None]), rng.normal(size=shape))
    add("smooth_l1", lambda x: p(smooth_l1(x * 2.0)), rng.normal(size=shape))
    cond = rng.random(shape) < 0.5
    add("where", lambda x: p(T.where(cond, x, x * x)), rng.normal(size=shape))

    w3 = rng.normal(size=(4, 3, 3, 3))
    b4 = rng.normal(size=4)
    img = rng.normal(size=(2, 3, 6, 7))
    add("conv2d_input", lambda x: p_2_4_3_4(T.conv2d(x, T.Tensor(w3), T.Tensor(b4), 2, 1)), img)
    add("conv2d_weight", lambda w: p_2_4_6_7(T.conv2d(T.Tensor(img), w, None, 1, 1)), w3)
    w24 = rng.normal(size=(24, 3, 3, 3))
    p_2_24_6_7 = _projector(rng, (2, 24, 6, 7))
    add("conv2d_bias", lambda b: p_2_24_6_7(T.conv2d(T.Tensor(img), T.Tensor(w24), b, 1, 1)), rng.normal(size=24))
    wt = rng.normal(size=(3, 2, 4, 4))
    add(
        "conv_transpose2d_input",
        lambda x: p_2_2_12_14(T.conv_transpose2d(x, T.Tensor(wt), None, 2, 1)),
        img,
    )
    add(
        "conv_transpose2d_weight",
        lambda w: p_2_2_12_14(T.conv_transpose2d(T.Tensor(img), w, T.Tensor(np.ones(2)), 2, 1)),
        wt,
    )

    gamma, beta = rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)

    def bn(x):
        y = T.batch_norm(x, T.Tensor(gamma), T.Tensor(beta), np.zeros(3), np.ones(3), training=True)
        return p(y)

    add("batch_norm", bn, rng.normal(size=shape))
    grid = GridSpec(8, 12, 4)
    mask = valid_mask(grid)[None]
    add("softmax_masked", lambda x: p_q(T.softmax_channels(x, mask)), rng.normal(size=q_shape))
    add("block_sum", lambda x: p_2_3_2_2(T.block_sum(x, 3)), rng.normal(size=shape))
    add("block_repeat", lambda x: p(T.block_repeat(x, 3, (4, 5))), rng.normal(size=(2, 3, 2, 2)))

    feats = rng.normal(size=(2, 3, 8, 12))
    logits = rng.normal(size=q_shape)

    def q_of(x):
        return T.softmax_channels(x, mask)

    add(
        "superpixel_centers",
        lambda x: p_2_3_2_3(superpixel_centers(q_of(x), T.Tensor(feats), 4)[0]),
        logits,
    )
    add(
        "superpixel_centers_features",
        lambda f: p_2_3_2_3(superpixel_centers(T.Tensor(q_of(T.Tensor(logits)).data), f, 4)[0]),
        feats,
    )
    centers = rng.normal(size=(2, 3, 2, 3))
    add(
        "reconstruct_pixels",
        lambda x: p_2_3_8_12(reconstruct_pixels(q_of(x), T.Tensor(centers), 4)),
        logits,
    )

    cfg = LossConfig(m=0.5, cell=4)
    lab = rng.uniform(0, 50, size=(2, 3, 8, 12))
    add("slic_loss", lambda x: slic_loss(q_of(x), T.Tensor(lab), cfg).total, logits)
    onehot = np.eye(3)[rng.integers(0, 3, size=(2, 8, 12))].transpose(0, 3, 1, 2)
    add("semantic_loss", lambda x: semantic_loss(q_of(x), T.Tensor(onehot), cfg).total, logits)

    gt = rng.uniform(0, 10, size=(1, 1, 8, 12))
    valid = rng.random((1, 1, 8, 12)) < 0.8
    lab1 = lab[:1]
    preds = [rng.uniform(0, 10, size=(1, 1, 8, 12)) for _ in range(3)]

    def joint(x):
        q = q_of(x)[:1]
        return joint_loss([T.Tensor(pr) for pr in preds], gt, valid, q, T.Tensor(lab1), cfg)

    add("joint_loss_assoc", joint, logits[:1])
    no_slic = LossConfig(m=0.5, cell=4, lam=0.0)
    add(
        "joint_loss_preds",
        lambda d: joint_loss([d, T.Tensor(preds[1]), T.Tensor(preds[2])], gt, valid, None, None, no_slic),
        preds[0],
    )
    return checks


def _param_difference(loss, prm, idx, step: float) -> tuple[float, bool]:
    """Central difference along one parameter and whether the stencil stays on one linear piece."""
    orig = prm.data[idx]
    with T.record_activation_signs() as plus_signs:
        prm.data[idx] = orig + step
        f_plus = float(loss().data)
    with T.record_activation_signs() as minus_signs:
        prm.data[idx] = orig - step
        f_minus = float(loss().data)
    prm.data[idx] = orig
    smooth = all(np.array_equal(a, b) for a, b in zip(plus_signs, minus_signs))
    return (f_plus - f_minus) / (2 * step), smooth


def network_checks(rng: np.random.Generator, n_coords: int = DEFAULT_COORDS, step: float = NETWORK_STEP) -> list:
    """Gradients of the semantic, SLIC and joint losses w.r.t. a sample of
    network parameters (float64, tiny network)."""
    from .net import NetworkSpec, SpixelNet

    model = SpixelNet(NetworkSpec.default(bottleneck=16), seed=int(rng.integers(1 << 31)))
    model.to_dtype(np.float64)
    # batch 2: with batch 1 the 1x1 bottleneck has zero batch variance and sits on the leaky-ReLU kink
    images = rng.normal(size=(2, 3, 16, 16))
    cell = 4
    grid = GridSpec(16, 16, cell)
    mask = valid_mask(grid)[None]
    onehot = T.Tensor(np.eye(4)[rng.integers(0, 4, size=(2, 16, 16))].transpose(0, 3, 1, 2))
    lab = T.Tensor(rng.uniform(0, 100, size=(2, 3, 16, 16)))
    gt = rng.uniform(0, 10, size=(2, 1, 16, 16))
    valid = rng.random(gt.shape) < 0.8
    preds = [T.Tensor(gt + rng.normal(scale=s, size=gt.shape)) for s in (2.0, 1.0, 0.5)]
    sem_cfg = LossConfig(m=0.003, cell=cell)
    slic_cfg = LossConfig(m=1.0, cell=cell)

    def assoc():
        return T.softmax_channels(model.logits(T.Tensor(images)), mask)

    losses = {
        "semantic": (lambda: semantic_loss(assoc(), onehot, sem_cfg).total, ("cnv0a", "cnv2b", "cnv4b", "upcnv3", "icnv1", "assoc")),
        "slic": (lambda: slic_loss(assoc(), lab, slic_cfg).total, ("cnv0a", "cnv4b", "icnv0", "assoc")),
        "joint": (lambda: joint_loss(preds, gt, valid, assoc(), lab, slic_cfg), ("cnv1a", "upcnv0", "assoc")),
    }
    params = model.parameters()
    results = []
    for kind, (loss, layers) in losses.items():
        for prm in params:
            prm.grad = None
        T.backward(loss(), params)
        for name in layers:
            prm = model.params[f"{name}.weight"]
            analytic = prm.grad.copy()
            worst, used, skipped = 0.0, 0, 0
            # a coordinate whose stencil crosses a leaky-ReLU kink at every step is replaced;
            # the decision uses activation signs only, never the analytic gradient
            for flat in rng.permutation(prm.size)[: 3 * n_coords]:
                idx = np.unravel_index(flat, prm.shape)
                for k in range(NETWORK_SHRINKS + 1):
                    numeric, smooth = _param_difference(loss, prm, idx, step / 10**k)
                    if smooth:
                        break
                if not smooth:
                    skipped += 1
                    continue
                worst = max(worst, relative_error(float(analytic[idx]), numeric))
                used += 1
                if used == min(n_coords, prm.size):
                    break
            if used < min(n_coords, prm.size):
                worst = float("inf")
            results.append(CheckResult(f"network:{kind}:{name}.weight", worst, used, skipped))
    return results


def run_suite(seed: int = 0, n_coords: int = DEFAULT_COORDS) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, x0) in operator_checks(rng).items():
        err = check_gradient(fn, x0, rng, n_coords, LOSS_STEP if name in LOSS_CHECKS else DEFAULT_STEP)
        results.append(CheckResult(name, err, min(n_coords, np.size(x0))))
    results.extend(network_checks(rng, n_coords))
    return results
