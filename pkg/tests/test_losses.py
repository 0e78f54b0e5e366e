import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualtrack.losses import (LossConfig, ResidualParams, bce_loss, combine_losses, disc_residual,
                              fc_pr_loss, fc_rg_loss, focal_loss, hinge_l2_loss, l1_loss, total_loss)
from oracles import central_diff, rel_err

LN2 = math.log(2.0)


def test_focal_examples():
    assert focal_loss(np.array([0.5]), np.array([1.0]), 2.0)[0] == pytest.approx(0.25 * LN2, abs=1e-6)
    near = focal_loss(np.array([1 - 1e-9, 1e-9]), np.array([1.0, 0.0]))[0]
    assert near < 1e-12
    with pytest.raises(ValueError, match="probability domain"):
        focal_loss(np.array([0.0]), np.array([1.0]))
    with pytest.raises(ValueError, match="probability domain"):
        focal_loss(np.array([1.2]), np.array([0.0]))


def test_focal_ignores_minus_one_cells():
    P = np.array([0.3, 0.6, 0.9])
    full = focal_loss(P, np.array([1.0, -1.0, 0.0]))
    drop = focal_loss(P[[0, 2]], np.array([1.0, 0.0]))
    assert full[0] == pytest.approx(drop[0])
    assert full[1][1] == 0.0


def test_focal_gamma_zero_is_balanced_cross_entropy(rng):
    P = rng.uniform(0.01, 0.99, 40)
    Y = rng.integers(0, 2, 40).astype(float)
    pos, neg = Y == 1, Y == 0
    bce = -np.log(P[pos]).mean() - np.log(1 - P[neg]).mean()
    assert abs(focal_loss(P, Y, 0.0)[0] - bce) <= 1e-12


def test_fc_pr_examples():
    assert fc_pr_loss(np.array([0.5]), np.array([1.0]))[0] == pytest.approx(0.25 * LN2, abs=1e-6)
    assert fc_pr_loss(np.array([1 - 1e-12]), np.array([1.0]))[0] < 1e-20
    assert fc_pr_loss(np.array([0.5]), np.array([0.5]), 2, 4.0)[0] == pytest.approx(0.010830, abs=1e-6)


def test_fc_rg_examples():
    Y = np.array([0.2, 0.7, 1.0 - 1e-9])
    assert fc_rg_loss(Y.copy(), Y)[0] == 0.0
    assert fc_rg_loss(np.array([0.5]), np.array([1.0]), 2, 4.0)[0] == pytest.approx(0.25 * LN2, abs=1e-6)
    with pytest.raises(ValueError):
        fc_rg_loss(np.array([0.5]), np.array([0.5]), alpha=3)


def test_fc_rg_stationary_at_target(rng):
    Y = rng.uniform(0.05, 0.95, 30)
    g_fd = central_diff(lambda p: fc_rg_loss(p, Y)[0], Y.copy())
    assert np.max(np.abs(g_fd)) < 1e-8
    assert np.max(np.abs(fc_rg_loss(Y.copy(), Y)[1])) < 1e-12


def test_disc_residual_examples():
    p = ResidualParams(np.full(3, 2.0), np.ones(3), np.array([0.1, 0.2, 0.3]))
    P = np.array([0.5, -1.0, 0.2])
    r, _ = disc_residual(P, p)
    assert r == pytest.approx(2.0 * (P - p.y))
    clip = ResidualParams(np.array([2.0]), np.array([0.0]), np.array([0.0]))
    assert disc_residual(np.array([-0.5]), clip)[0].tolist() == [0.0]
    assert disc_residual(np.array([0.5]), clip)[0].tolist() == [1.0]
    # subgradient at the kink takes the clipped branch
    assert disc_residual(np.array([0.0]), clip)[1].tolist() == [0.0]


def test_residual_params_validation():
    with pytest.raises(ValueError):
        ResidualParams(np.ones(2), np.ones(3), np.ones(2))
    with pytest.raises(ValueError):
        ResidualParams(-np.ones(2), np.ones(2), np.ones(2))
    with pytest.raises(ValueError):
        ResidualParams(np.ones(2), np.full(2, 1.5), np.ones(2))


def test_hinge_examples():
    region = np.array([False, True])
    assert hinge_l2_loss(np.array([-0.4, 0.7]), np.array([0.0, 0.7]), region)[0] == 0.0
    assert hinge_l2_loss(np.array([0.3]), np.array([0.0]), np.array([False]))[0] == pytest.approx(0.09)


def test_total_loss_weighting():
    comps = {"r": 0.1, "a": 0.2, "b": 0.3, "o": 0.4}
    assert combine_losses(comps, LossConfig()) == pytest.approx(2.94, abs=1e-12)
    assert combine_losses(dict.fromkeys("raob", 0.0)) == 0.0
    with pytest.raises(ValueError):
        LossConfig(alpha=3)
    with pytest.raises(ValueError):
        LossConfig(lambda_a=-1)


def test_total_loss_gradients_are_weighted_components(rng):
    inst = _total_instance(rng)
    res = total_loss(*inst)
    s_r, y_r, s_a, y_a, box, box_gt, io, io_gt = inst
    assert res.grads["s_r"] == pytest.approx(1.0 * hinge_l2_loss(s_r, y_r, y_r >= 0.5)[1])
    assert res.grads["s_a"] == pytest.approx(10.0 * focal_loss(s_a, y_a)[1])
    assert res.grads["box"] == pytest.approx(1.2 * l1_loss(box, box_gt, y_a == 1)[1])
    assert res.grads["iou"] == pytest.approx(1.2 * bce_loss(io, io_gt)[1])
    assert res.value == pytest.approx(combine_losses(res.components))


# ------------------------------------------------------------------ finite differences


def _probs(rng, shape):
    return rng.uniform(0.05, 0.95, shape)


def _away_from_zero(rng, shape):
    x = rng.normal(0, 0.5, shape)
    return np.where(np.abs(x) < 1e-3, 1e-2, x)


def _total_instance(rng):
    H, W, A = 4, 4, 3
    s_r = _away_from_zero(rng, (H, W, 1))
    y_r = rng.uniform(0, 1, (H, W, 1))
    s_a = _probs(rng, (H, W, A))
    y_a = rng.choice([-1.0, 0.0, 1.0], (H, W, A))
    y_a[0, 0, 0] = 1.0
    box_gt = rng.normal(0, 1, (H, W, A, 4))
    # keep L1 away from its kink
    box = box_gt + np.where(rng.random((H, W, A, 4)) < 0.5, -1, 1) * rng.uniform(0.01, 0.5, (H, W, A, 4))
    io = _probs(rng, (H, W, A))
    io_gt = rng.uniform(0, 1, (H, W, A))
    return s_r, y_r, s_a, y_a, box, box_gt, io, io_gt


def _check(fn, x, n_tol=1e-5):
    val, grad = fn(x)
    fd = central_diff(lambda z: fn(z)[0], x)
    assert rel_err(grad, fd) < n_tol


def test_gradients_focal(rng):
    for _ in range(100):
        Y = rng.choice([-1.0, 0.0, 1.0], (3, 3, 2))
        Y[0, 0, 0] = 1.0
        _check(lambda p: focal_loss(p, Y, 2.0), _probs(rng, Y.shape))


def test_gradients_fc_pr(rng):
    for _ in range(100):
        Y = rng.uniform(0, 1, (3, 3, 1))
        Y[1, 1, 0] = 1.0
        _check(lambda p: fc_pr_loss(p, Y), _probs(rng, Y.shape))


def test_gradients_fc_rg(rng):
    for _ in range(100):
        Y = rng.uniform(0.05, 1.0, (3, 3, 1))
        _check(lambda p: fc_rg_loss(p, Y), _probs(rng, Y.shape))


def test_gradients_hinge(rng):
    for _ in range(100):
        Y = rng.uniform(0, 1, (4, 4, 1))
        region = Y >= 0.5
        _check(lambda p: hinge_l2_loss(p, Y, region), _away_from_zero(rng, Y.shape))


def test_gradients_bce(rng):
    for _ in range(100):
        T = rng.uniform(0, 1, (3, 4))
        _check(lambda p: bce_loss(p, T), _probs(rng, T.shape))


def test_gradients_l1(rng):
    for _ in range(100):
        T = rng.normal(0, 1, (3, 3, 2, 4))
        mask = rng.random((3, 3, 2)) < 0.5
        mask[0, 0, 0] = True
        off = np.where(rng.random(T.shape) < 0.5, -1, 1) * rng.uniform(0.01, 0.5, T.shape)
        _check(lambda p: l1_loss(p, T, mask), T + off)


def test_gradients_total(rng):
    for _ in range(100):
        s_r, y_r, s_a, y_a, box, box_gt, io, io_gt = _total_instance(rng)
        res = total_loss(s_r, y_r, s_a, y_a, box, box_gt, io, io_gt)
        pieces = [
            ("s_r", s_r, lambda z: total_loss(z, y_r, s_a, y_a, box, box_gt, io, io_gt).value),
            ("s_a", s_a, lambda z: total_loss(s_r, y_r, z, y_a, box, box_gt, io, io_gt).value),
            ("box", box, lambda z: total_loss(s_r, y_r, s_a, y_a, z, box_gt, io, io_gt).value),
            ("iou", io, lambda z: total_loss(s_r, y_r, s_a, y_a, box, box_gt, z, io_gt).value),
        ]
        for name, x, f in pieces:
            assert rel_err(res.grads[name], central_diff(f, x)) < 1e-5


def test_gradient_disc_residual_jacobian(rng):
    for _ in range(100):
        shape = (4, 4, 1)
        params = ResidualParams(rng.uniform(0, 2, shape), rng.uniform(0, 1, shape), rng.uniform(0, 1, shape))
        P = _away_from_zero(rng, shape)

        def half_sq(p):
            r, _ = disc_residual(p, params)
            return 0.5 * float(np.sum(r ** 2))

        r, jac = disc_residual(P, params)
        assert rel_err(r * jac, central_diff(half_sq, P)) < 1e-5


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=20), st.integers(0, 2 ** 31 - 1))
def test_losses_nonnegative(ps, seed):
    rng = np.random.default_rng(seed)
    P = np.array(ps)
    Yb = rng.choice([-1.0, 0.0, 1.0], P.shape)
    Yc = rng.uniform(0.01, 1.0, P.shape)
    assert focal_loss(P, Yb)[0] >= 0
    assert fc_pr_loss(P, Yc)[0] >= 0
    assert fc_rg_loss(P, Yc)[0] >= 0
    assert bce_loss(P, Yc)[0] >= 0
    assert hinge_l2_loss(P - 0.5, Yc, Yc > 0.5)[0] >= 0
