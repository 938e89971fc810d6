"""AdamW mechanics, gradient clipping, and the LR schedule."""

import math

import numpy as np
import pytest

from entlab.autodiff import Tensor
from entlab.optim import AdamW, OptimConfig, ScheduleConfig, lr_at


def park(shape, seed, grad=True):
    rng = np.random.default_rng(seed)
    t = Tensor(rng.standard_normal(shape), requires_grad=True)
    if grad:
        t.grad = rng.standard_normal(shape)
    return t


# ------------------------------------------------------------------ schedule


def test_warmup_ramp():
    sched = ScheduleConfig(warmup_steps=4, total_steps=20).validate()
    base = 1e-3
    for step in range(4):
        assert lr_at(step, base, sched) == pytest.approx(base * (step + 1) / 4)
    # first post-warmup step sits at the cosine peak
    assert lr_at(4, base, sched) == pytest.approx(base)


def test_cosine_decays_to_zero():
    sched = ScheduleConfig(warmup_steps=2, total_steps=10).validate()
    base = 3e-4
    lrs = [lr_at(s, base, sched) for s in range(2, 11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(0.0, abs=1e-18)
    mid = lr_at(6, base, sched)  # halfway through the decay span
    assert mid == pytest.approx(base * 0.5, rel=1e-12)


def test_constant_decay_flat():
    sched = ScheduleConfig(warmup_steps=3, total_steps=10, decay="constant").validate()
    assert lr_at(3, 1e-3, sched) == 1e-3
    assert lr_at(9, 1e-3, sched) == 1e-3
    assert lr_at(500, 1e-3, sched) == 1e-3


def test_lr_clamped_past_total_steps():
    sched = ScheduleConfig(warmup_steps=0, total_steps=10).validate()
    assert lr_at(50, 1e-3, sched) == pytest.approx(0.0, abs=1e-18)


def test_schedule_validation():
    with pytest.raises(ValueError, match="total_steps > warmup_steps"):
        ScheduleConfig(warmup_steps=10, total_steps=10).validate()
    with pytest.raises(ValueError, match="unknown decay"):
        ScheduleConfig(warmup_steps=0, total_steps=5, decay="linear").validate()


# ---------------------------------------------------------------------- adam


def test_single_step_matches_closed_form():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.5])
    cfg = OptimConfig(weight_decay=0.0, grad_clip_norm=0.0)
    opt = AdamW({"w": p}, cfg)
    g = p.grad.copy()
    x0 = p.data.copy()
    opt.step(lr=0.1)
    # bias-corrected first step: update = g / (|g| + eps)
    expect = x0 - 0.1 * g / (np.abs(g) + cfg.eps_adam)
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)


def test_two_steps_match_reference_loop():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 4))
    g1 = rng.standard_normal((3, 4))
    g2 = rng.standard_normal((3, 4))
    cfg = OptimConfig(weight_decay=0.0)
    p = Tensor(x0.copy(), requires_grad=True)
    opt = AdamW({"w": p}, cfg)
    p.grad = g1.copy()
    opt.step(0.01)
    p.grad = g2.copy()
    opt.step(0.01)

    # independent reference re-derivation
    m = np.zeros_like(x0)
    v = np.zeros_like(x0)
    x = x0.copy()
    for t, g in ((1, g1), (2, g2)):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mh = m / (1 - cfg.beta1**t)
        vh = v / (1 - cfg.beta2**t)
        x -= 0.01 * mh / (np.sqrt(vh) + cfg.eps_adam)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_none_grad_params_fully_skipped():
    active = park((2, 2), 1)
    frozen = park((2, 2), 2, grad=False)
    frozen_before = frozen.data.copy()
    opt = AdamW({"a": active, "f": frozen}, OptimConfig())
    opt.step(0.1)
    assert np.array_equal(frozen.data, frozen_before)
    assert np.all(opt.m["f"] == 0.0) and np.all(opt.v["f"] == 0.0)
    assert not np.array_equal(active.data, park((2, 2), 1).data)


def test_weight_decay_only_on_matrices():
    mat = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    vec = Tensor(np.full((2,), 3.0), requires_grad=True)
    mat.grad = np.zeros((2, 2))
    vec.grad = np.zeros((2,))
    cfg = OptimConfig(weight_decay=0.1, grad_clip_norm=0.0)
    opt = AdamW({"m": mat, "v": vec}, cfg)
    opt.step(lr=0.5)
    # zero grad: matrix sees pure decay x -= lr * wd * x, vector untouched
    np.testing.assert_allclose(mat.data, 3.0 - 0.5 * 0.1 * 3.0, rtol=1e-12)
    np.testing.assert_allclose(vec.data, 3.0, rtol=0)


def test_weight_decay_is_decoupled():
    # decay must not leak into the moment estimates
    p = Tensor(np.full((2, 2), 2.0), requires_grad=True)
    p.grad = np.ones((2, 2))
    opt = AdamW({"w": p}, OptimConfig(weight_decay=0.5, grad_clip_norm=0.0))
    opt.step(0.0)  # lr 0: no movement at all, moments still update from g
    np.testing.assert_allclose(p.data, 2.0)
    np.testing.assert_allclose(opt.m["w"], 0.1 * np.ones((2, 2)), rtol=1e-12)


# ------------------------------------------------------------------ clipping


def test_clip_returns_preclip_norm_and_rescales():
    p = park((10,), 3)
    p.grad = np.full(10, 2.0)
    true_norm = math.sqrt(10 * 4.0)
    opt = AdamW({"w": p}, OptimConfig(grad_clip_norm=1.0))
    returned = opt.clip_gradients()
    assert returned == pytest.approx(true_norm, rel=1e-12)
    post = math.sqrt(float(np.sum(p.grad**2)))
    assert post <= 1.0 + 1e-9
    assert post == pytest.approx(1.0, rel=1e-12)


def test_clip_noop_when_under_threshold():
    p = park((4,), 4)
    p.grad = np.full(4, 0.1)
    before = p.grad.copy()
    opt = AdamW({"w": p}, OptimConfig(grad_clip_norm=10.0))
    opt.clip_gradients()
    assert np.array_equal(p.grad, before)


def test_clip_disabled_when_nonpositive():
    for clip in (0.0, -1.0):
        p = park((4,), 5)
        p.grad = np.full(4, 100.0)
        before = p.grad.copy()
        opt = AdamW({"w": p}, OptimConfig(grad_clip_norm=clip))
        norm = opt.clip_gradients()
        assert norm == pytest.approx(200.0)
        assert np.array_equal(p.grad, before)


def test_global_norm_spans_params_and_ignores_none():
    a = park((3,), 6)
    a.grad = np.array([3.0, 0.0, 0.0])
    b = park((3,), 7, grad=False)
    c = park((3,), 8)
    c.grad = np.array([0.0, 4.0, 0.0])
    opt = AdamW({"a": a, "b": b, "c": c}, OptimConfig())
    assert opt.grad_global_norm() == pytest.approx(5.0, rel=1e-12)


def test_zero_grad_clears_all():
    a = park((2,), 9)
    opt = AdamW({"a": a}, OptimConfig())
    opt.zero_grad()
    assert a.grad is None


# ------------------------------------------------------------------- state


def test_state_tensors_naming_and_load():
    a = park((2, 3), 10)
    opt = AdamW({"layers.0.attn.wq": a}, OptimConfig())
    opt.step(0.01)
    st = opt.state_tensors()
    assert set(st) == {"adam.m.layers.0.attn.wq", "adam.v.layers.0.attn.wq"}

    b = Tensor(a.data.copy(), requires_grad=True)
    opt2 = AdamW({"layers.0.attn.wq": b}, OptimConfig())
    opt2.load_state({k: v.copy() for k, v in st.items()}, t=opt.t)
    assert opt2.t == 1
    np.testing.assert_array_equal(opt2.m["layers.0.attn.wq"], opt.m["layers.0.attn.wq"])
    np.testing.assert_array_equal(opt2.v["layers.0.attn.wq"], opt.v["layers.0.attn.wq"])


def test_resumed_optimizer_continues_bitwise():
    rng = np.random.default_rng(11)
    grads = [rng.standard_normal((3, 3)) for _ in range(4)]
    x0 = rng.standard_normal((3, 3))

    def run(n, preload=None):
        p = Tensor(x0.copy(), requires_grad=True)
        opt = AdamW({"w": p}, OptimConfig(weight_decay=0.01, grad_clip_norm=0.0))
        start = 0
        if preload is not None:
            arrays, t, data = preload
            p.data[...] = data
            opt.load_state(arrays, t)
            start = t
        for i in range(start, n):
            p.grad = grads[i].copy()
            opt.step(0.01)
        return p.data.copy(), {k: v.copy() for k, v in opt.state_tensors().items()}, opt.t

    straight, _, _ = run(4)
    half, st, t = run(2)
    resumed, _, _ = run(4, preload=(st, t, half))
    assert np.array_equal(straight, resumed)
