"""Entropy-deviation regularizer: values, gating, gradients, invariances."""

import math

import numpy as np
import pytest

from entlab import autodiff as ad
from entlab import regularizer as R
from entlab.autodiff import Tensor
from entlab.model import init_params, make_config, model_forward
from entlab.regularizer import (
    RegConfig,
    ThresholdParams,
    penalty_from_entropies,
    reg_loss,
    total_loss,
)


def theta_grid(L, H, init=0.5):
    return ThresholdParams(L, H, init=init)


def scalar_entropies(vals):
    """[L][H] float grid -> graph-tensor grid, leaves tracked."""
    grid = []
    leaves = []
    for row in vals:
        out = []
        for v in row:
            t = Tensor(np.asarray(float(v)), requires_grad=True)
            leaves.append(t)
            out.append(t)
        grid.append(out)
    return grid, leaves


def brute_force(vals, theta, gamma, T):
    """Independent scalar reimplementation of the penalty."""
    e_max = math.log(T)
    tol = gamma * e_max
    L = len(vals)
    H = len(vals[0])
    total = 0.0
    for l in range(L):
        acc = 0.0
        for h in range(H):
            delta = vals[l][h] - theta[l][h] * e_max
            if abs(delta) > tol:
                acc += delta * delta
        total += acc / H
    return total / L


# ------------------------------------------------------------------- values


def test_plug_in_example():
    # one head at the entropy ceiling with theta 0.5 and gamma 0.2:
    # delta = log(128)/2, penalty = delta^2
    T = 128
    grid, _ = scalar_entropies([[math.log(T)]])
    th = theta_grid(1, 1, init=0.5)
    loss = penalty_from_entropies(grid, th, gamma=0.2, T=T)
    delta = math.log(T) / 2.0
    assert float(loss.data) == pytest.approx(delta * delta, rel=1e-12)
    assert abs(float(loss.data) - 5.88556) < 1e-4


def test_total_loss_plug_in():
    ce = Tensor(np.asarray(2.0))
    reg = Tensor(np.asarray(5.88556))
    out = total_loss(ce, reg, lam=1e-5)
    assert float(out.data) == pytest.approx(2.0000588556, rel=1e-12)


def test_total_loss_lambda_zero_returns_ce_itself():
    ce = Tensor(np.asarray(1.5), requires_grad=True)
    assert total_loss(ce, None, 0.0) is ce


def test_dead_zone_is_exactly_zero():
    # |delta| <= gamma * E_max gates the head off entirely
    T = 64
    e_max = math.log(T)
    for frac in (0.0, 0.05, 0.199):
        grid, _ = scalar_entropies([[0.5 * e_max + frac * e_max]])
        loss = penalty_from_entropies(grid, theta_grid(1, 1), gamma=0.2, T=T)
        assert float(loss.data) == 0.0


def test_on_target_head_contributes_zero():
    T = 32
    grid, _ = scalar_entropies([[0.5 * math.log(T)]])
    loss = penalty_from_entropies(grid, theta_grid(1, 1), gamma=0.2, T=T)
    assert float(loss.data) == 0.0


def test_brute_force_oracle_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        L = int(rng.integers(1, 4))
        H = int(rng.integers(1, 5))
        T = int(rng.choice([4, 16, 64, 128]))
        gamma = float(rng.uniform(0.0, 0.5))
        vals = rng.uniform(0, math.log(T), size=(L, H))
        th = rng.uniform(0.1, 0.9, size=(L, H))
        grid, _ = scalar_entropies(vals.tolist())
        theta = Tensor(th.copy(), requires_grad=True)
        loss = penalty_from_entropies(grid, theta, gamma=gamma, T=T)
        expect = brute_force(vals.tolist(), th.tolist(), gamma, T)
        assert float(loss.data) == pytest.approx(expect, abs=1e-12)


# ----------------------------------------------------------------- gradients


def test_theta_gradient_closed_form_single_head():
    T = 128
    e_max = math.log(T)
    grid, _ = scalar_entropies([[e_max]])
    th = theta_grid(1, 1, init=0.5)
    loss = penalty_from_entropies(grid, th, gamma=0.2, T=T)
    ad.backward(loss)
    delta = e_max - 0.5 * e_max
    assert th.theta.grad[0, 0] == pytest.approx(-2.0 * e_max * delta, rel=1e-12)


def test_theta_gradient_closed_form_multi_head():
    # averaged over heads then layers: each penalized head sees the 1/(L*H) factor
    T = 64
    e_max = math.log(T)
    vals = [[e_max, 0.5 * e_max], [0.0, 0.5 * e_max]]
    grid, _ = scalar_entropies(vals)
    th = theta_grid(2, 2, init=0.5)
    loss = penalty_from_entropies(grid, th, gamma=0.2, T=T)
    ad.backward(loss)
    g = th.theta.grad
    d00 = e_max - 0.5 * e_max
    d10 = 0.0 - 0.5 * e_max
    assert g[0, 0] == pytest.approx(-2.0 * e_max * d00 / 4.0, rel=1e-12)
    assert g[1, 0] == pytest.approx(-2.0 * e_max * d10 / 4.0, rel=1e-12)
    assert g[0, 1] == 0.0 and g[1, 1] == 0.0  # gated heads get exact zero


def test_entropy_gradient_inside_penalized_region():
    T = 16
    e_max = math.log(T)
    grid, leaves = scalar_entropies([[e_max * 0.95]])
    loss = penalty_from_entropies(grid, theta_grid(1, 1), gamma=0.2, T=T)
    ad.backward(loss)
    delta = 0.95 * e_max - 0.5 * e_max
    assert leaves[0].grad == pytest.approx(2.0 * delta, rel=1e-12)


def test_gate_boundary_has_zero_gradient():
    # |delta| == tol exactly: strict > gate keeps the head out.
    # theta = 0 makes delta equal the raw entropy value bit for bit,
    # so v = gamma * log(T) sits exactly on the boundary.
    T = 64
    gamma = 0.2
    v = gamma * math.log(T)
    grid, leaves = scalar_entropies([[v]])
    th = Tensor(np.zeros((1, 1)), requires_grad=True)
    loss = penalty_from_entropies(grid, th, gamma=gamma, T=T)
    assert float(loss.data) == 0.0
    ad.backward(loss)
    assert th.grad is None or np.all(th.grad == 0.0)
    assert leaves[0].grad is None or np.all(leaves[0].grad == 0.0)


def test_finite_difference_on_theta_away_from_boundary():
    T = 32
    e_max = math.log(T)
    vals = [[0.93 * e_max, 0.12 * e_max]]
    th0 = np.array([[0.5, 0.45]])

    def value(th_arr):
        grid, _ = scalar_entropies(vals)
        loss = penalty_from_entropies(grid, Tensor(th_arr.copy()), gamma=0.2, T=T)
        return float(loss.data)

    grid, _ = scalar_entropies(vals)
    theta = Tensor(th0.copy(), requires_grad=True)
    loss = penalty_from_entropies(grid, theta, gamma=0.2, T=T)
    ad.backward(loss)
    h = 1e-6
    for idx in [(0, 0), (0, 1)]:
        up = th0.copy()
        up[idx] += h
        dn = th0.copy()
        dn[idx] -= h
        fd = (value(up) - value(dn)) / (2 * h)
        assert theta.grad[idx] == pytest.approx(fd, abs=1e-5)


# ---------------------------------------------------------------- invariances


def test_gamma_monotonicity():
    rng = np.random.default_rng(1)
    T = 64
    for _ in range(20):
        vals = rng.uniform(0, math.log(T), size=(2, 3)).tolist()
        th = rng.uniform(0.2, 0.8, size=(2, 3))
        losses = []
        for gamma in (0.0, 0.1, 0.2, 0.4, 0.8):
            grid, _ = scalar_entropies(vals)
            loss = penalty_from_entropies(grid, Tensor(th), gamma=gamma, T=T)
            losses.append(float(loss.data))
        assert all(a >= b - 1e-15 for a, b in zip(losses, losses[1:]))


def test_head_permutation_invariance():
    rng = np.random.default_rng(2)
    T = 32
    vals = rng.uniform(0, math.log(T), size=(2, 4))
    th = rng.uniform(0.1, 0.9, size=(2, 4))
    perm = rng.permutation(4)
    a = penalty_from_entropies(
        scalar_entropies(vals.tolist())[0], Tensor(th), gamma=0.1, T=T
    )
    b = penalty_from_entropies(
        scalar_entropies(vals[:, perm].tolist())[0], Tensor(th[:, perm]), gamma=0.1, T=T
    )
    assert float(a.data) == pytest.approx(float(b.data), rel=1e-15)


def test_penalty_is_nonnegative():
    rng = np.random.default_rng(3)
    T = 16
    for _ in range(50):
        vals = rng.uniform(0, math.log(T), size=(1, 3)).tolist()
        th = rng.uniform(0, 1, size=(1, 3))
        grid, _ = scalar_entropies(vals)
        loss = penalty_from_entropies(grid, Tensor(th), gamma=0.05, T=T)
        assert float(loss.data) >= 0.0


# ------------------------------------------------------------- trace plumbing


def trace_for(name="smt_scfuffn", seed=0, B=2, **over):
    over.setdefault("L", 2)
    over.setdefault("H", 2)
    over.setdefault("d", 8)
    over.setdefault("T", 6)
    over.setdefault("vocab_size", 11)
    cfg = make_config(name, **over)
    params = init_params(cfg, seed=seed)
    tokens = np.random.default_rng(seed).integers(0, 11, size=(B, cfg.T))
    return cfg, params, model_forward(params, tokens)


def test_reg_loss_from_trace_matches_manual_computation():
    cfg, params, trace = trace_for()
    th = theta_grid(cfg.L, cfg.H)
    rc = RegConfig(lam=1e-5, gamma=0.0)
    loss = reg_loss(trace, th, rc, cfg.T)
    # manual: batch-mean row entropies per head, squared deviation, averages
    vals = []
    for layer in trace.attention:
        row = []
        for p in layer:
            e = ad.entropy_rows(p)
            row.append(float(np.mean(e.data)))
        vals.append(row)
    expect = brute_force(vals, [[0.5] * cfg.H] * cfg.L, 0.0, cfg.T)
    assert float(loss.data) == pytest.approx(expect, rel=1e-12)


def test_reg_loss_gradient_reaches_attention_and_tau():
    cfg, params, trace = trace_for()
    th = theta_grid(cfg.L, cfg.H)
    loss = reg_loss(trace, th, RegConfig(gamma=0.0), cfg.T)
    ad.backward(loss)
    assert th.theta.grad is not None
    assert params.tensors["layers.0.tau"].grad is not None
    assert params.tensors["layers.0.attn.wq"].grad is not None


def test_reg_loss_shape_mismatch_error():
    cfg, params, trace = trace_for()
    with pytest.raises(ValueError, match="threshold grid shape"):
        reg_loss(trace, theta_grid(cfg.L + 1, cfg.H), RegConfig(), cfg.T)


def test_reg_loss_needs_t_at_least_two():
    cfg, params, trace = trace_for()
    with pytest.raises(ValueError, match="T >= 2"):
        reg_loss(trace, theta_grid(cfg.L, cfg.H), RegConfig(), 1)


def test_per_position_listing_matches_manual_sum():
    cfg, params, trace = trace_for()
    th = theta_grid(cfg.L, cfg.H)
    rc = RegConfig(gamma=0.2, per_position_listing=True)
    loss = reg_loss(trace, th, rc, cfg.T)
    e_max = math.log(cfg.T)
    tol = 0.2 * e_max
    total = 0.0
    for l, layer in enumerate(trace.attention):
        acc = 0.0
        for h, p in enumerate(layer):
            rows = ad.entropy_rows(p).data  # [B, T]
            delta = rows - 0.5 * e_max
            acc += float(np.sum(np.where(np.abs(delta) > tol, delta * delta, 0.0)))
        total += acc / cfg.H
    total /= cfg.L
    assert float(loss.data) == pytest.approx(total, rel=1e-12)


def test_per_position_couples_to_batch_size():
    # the compatibility mode sums over positions, so doubling B roughly
    # doubles the loss; the primary mode is batch-size invariant by design
    cfg1, _, tr1 = trace_for(B=1, seed=5)
    cfg2, _, tr2 = trace_for(B=2, seed=5)
    th = theta_grid(cfg1.L, cfg1.H)
    rc = RegConfig(gamma=0.0, per_position_listing=True)
    a = float(reg_loss(tr1, th, rc, cfg1.T).data)
    b = float(reg_loss(tr2, th, rc, cfg2.T).data)
    assert b > a * 1.5


def test_empty_gate_returns_zero_tensor():
    T = 64
    grid, _ = scalar_entropies([[0.5 * math.log(T)]])
    loss = penalty_from_entropies(grid, theta_grid(1, 1), gamma=0.9, T=T)
    assert float(loss.data) == 0.0


# ------------------------------------------------------------------- config


def test_reg_config_validation():
    RegConfig().validate()
    with pytest.raises(ValueError, match="lambda"):
        RegConfig(lam=-1e-9).validate()
    with pytest.raises(ValueError, match="gamma"):
        RegConfig(gamma=1.0).validate()
    with pytest.raises(ValueError, match="threshold_init"):
        RegConfig(threshold_init=0.0).validate()


def test_threshold_params_shape_and_init():
    th = ThresholdParams(3, 5, init=0.25)
    assert th.shape == (3, 5)
    assert np.all(th.theta.data == 0.25)
    assert th.theta.requires_grad
