"""Finite-difference verification of every differentiable op.

Each named case builds fresh leaf tensors and a closure that recomputes a
scalar loss from their current values. Analytic gradients come from one
backward pass; numeric gradients from central differences with h = 1e-6.
The reported error is max over elements of |a - n| / max(1, |a|, |n|),
checked against 1e-5 in 64-bit arithmetic.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import init_params, make_config, model_forward, spectral_refresh
from .regularizer import RegConfig, ThresholdParams, reg_loss

H_FD = 1e-6
TOL = 1e-5


def rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(fn, t, h=H_FD):
    """Central-difference d fn / d t, elementwise."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        f1 = float(fn().data)
        flat[i] = old - h
        f0 = float(fn().data)
        flat[i] = old
        gf[i] = (f1 - f0) / (2.0 * h)
    return g


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    ok: bool
    seconds: float


def check_case(name, build, seed=0, h=H_FD, tol=TOL):
    """Run one case: build(rng) -> (loss_fn, {param_name: leaf Tensor})."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    fn, params = build(rng)
    for p in params.values():
        p.grad = None
    loss = fn()
    if loss.data.size != 1:
        raise ValueError(f"case {name!r} loss is not scalar")
    ad.backward(loss)
    worst = 0.0
    for pname, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(fn, p, h)
        worst = max(worst, rel_err(analytic, numeric))
    return CaseResult(name, worst, worst < tol, time.time() - t0)


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _const(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _weighted(out, c):
    return ad.sum_(ad.mul(out, c))


# ---------------------------------------------------------------- cases

def _case_add(rng):
    a, b, c = _leaf(rng, 3, 4), _leaf(rng, 3, 4), _const(rng, 3, 4)
    return lambda: _weighted(ad.add(a, b), c), {"a": a, "b": b}


def _case_add_broadcast(rng):
    a, b, c = _leaf(rng, 3, 4), _leaf(rng, 4), _const(rng, 3, 4)
    return lambda: _weighted(ad.add(a, b), c), {"a": a, "b": b}


def _case_sub(rng):
    a, b, c = _leaf(rng, 2, 5), _leaf(rng, 2, 5), _const(rng, 2, 5)
    return lambda: _weighted(ad.sub(a, b), c), {"a": a, "b": b}


def _case_mul(rng):
    a, b, c = _leaf(rng, 3, 3), _leaf(rng, 3, 3), _const(rng, 3, 3)
    return lambda: _weighted(ad.mul(a, b), c), {"a": a, "b": b}


def _case_div(rng):
    a, c = _leaf(rng, 3, 3), _const(rng, 3, 3)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    return lambda: _weighted(ad.div(a, b), c), {"a": a, "b": b}


def _case_scale(rng):
    a, c = _leaf(rng, 4), _const(rng, 4)
    return lambda: _weighted(ad.scale(a, -1.7), c), {"a": a}


def _case_matmul(rng):
    a, b, c = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _const(rng, 3, 2)
    return lambda: _weighted(ad.matmul(a, b), c), {"a": a, "b": b}


def _case_matmul_batched(rng):
    a, b, c = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _const(rng, 2, 3, 5)
    return lambda: _weighted(ad.matmul(a, b), c), {"a": a, "b": b}


def _case_exp(rng):
    a, c = _leaf(rng, 3, 3), _const(rng, 3, 3)
    return lambda: _weighted(ad.exp(a), c), {"a": a}


def _case_log(rng):
    a = Tensor(rng.uniform(0.2, 3.0, size=(3, 3)), requires_grad=True)
    c = _const(rng, 3, 3)
    return lambda: _weighted(ad.log(a), c), {"a": a}


def _case_sqrt(rng):
    a = Tensor(rng.uniform(0.3, 3.0, size=(4,)), requires_grad=True)
    c = _const(rng, 4)
    return lambda: _weighted(ad.sqrt(a), c), {"a": a}


def _case_square(rng):
    a, c = _leaf(rng, 2, 3), _const(rng, 2, 3)
    return lambda: _weighted(ad.square(a), c), {"a": a}


def _case_abs(rng):
    vals = rng.uniform(0.2, 1.5, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
    a = Tensor(vals, requires_grad=True)
    c = _const(rng, 3, 3)
    return lambda: _weighted(ad.abs_(a), c), {"a": a}


def _case_relu(rng):
    vals = rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    a = Tensor(vals, requires_grad=True)
    c = _const(rng, 3, 4)
    return lambda: _weighted(ad.relu(a), c), {"a": a}


def _case_gelu(rng):
    a, c = _leaf(rng, 3, 4, lo=-2.0, hi=2.0), _const(rng, 3, 4)
    return lambda: _weighted(ad.gelu(a), c), {"a": a}


def _case_softplus(rng):
    a, c = _leaf(rng, 3, 3, lo=-3.0, hi=3.0), _const(rng, 3, 3)
    return lambda: _weighted(ad.softplus(a), c), {"a": a}


def _case_reciprocal_clamped(rng):
    vals = rng.uniform(0.5, 2.0, size=(4,)) * rng.choice([-1.0, 1.0], size=(4,))
    a = Tensor(vals, requires_grad=True)
    c = _const(rng, 4)
    return lambda: _weighted(ad.reciprocal_clamped(a), c), {"a": a}


def _case_sum_axes(rng):
    a, c = _leaf(rng, 2, 3, 4), _const(rng, 3)
    return lambda: _weighted(ad.sum_(a, axis=(0, 2)), c), {"a": a}


def _case_mean(rng):
    a, c = _leaf(rng, 2, 3, 4), _const(rng, 2, 4)
    return lambda: _weighted(ad.mean(a, axis=1), c), {"a": a}


def _case_transpose(rng):
    a, c = _leaf(rng, 2, 3, 4), _const(rng, 4, 2, 3)
    return lambda: _weighted(ad.transpose(a, (2, 0, 1)), c), {"a": a}


def _case_transpose_last(rng):
    a, c = _leaf(rng, 2, 3, 4), _const(rng, 2, 4, 3)
    return lambda: _weighted(ad.transpose_last(a), c), {"a": a}


def _case_reshape(rng):
    a, c = _leaf(rng, 3, 4), _const(rng, 2, 6)
    return lambda: _weighted(ad.reshape(a, (2, 6)), c), {"a": a}


def _case_slice(rng):
    a, c = _leaf(rng, 4, 5), _const(rng, 2, 3)
    key = (slice(1, 3), slice(0, 3))
    return lambda: _weighted(ad.static_slice(a, key), c), {"a": a}


def _case_concat(rng):
    a, b, c = _leaf(rng, 3, 2), _leaf(rng, 3, 4), _const(rng, 3, 6)
    return lambda: _weighted(ad.concat_last([a, b]), c), {"a": a, "b": b}


def _case_embedding(rng):
    w = _leaf(rng, 7, 3)
    idx = rng.integers(0, 7, size=(2, 4))
    c = _const(rng, 2, 4, 3)
    return lambda: _weighted(ad.embedding(w, idx), c), {"w": w}


def _case_layernorm(rng):
    x, g, b = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    c = _const(rng, 3, 5)
    return lambda: _weighted(ad.layernorm(x, g, b), c), {"x": x, "g": g, "b": b}


def _case_softmax_logits(rng):
    z = _leaf(rng, 2, 4, 4, lo=-2.0, hi=2.0)
    c = _const(rng, 2, 4, 4)
    fn = lambda: _weighted(ad.masked_temperature_softmax(z, None, 0.5), c)
    return fn, {"z": z}


def _case_softmax_temperature(rng):
    z = _leaf(rng, 4, 4, lo=-2.0, hi=2.0)
    t = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
    c = _const(rng, 4, 4)
    fn = lambda: _weighted(ad.masked_temperature_softmax(z, t, 0.5), c)
    return fn, {"z": z, "t": t}


def _case_entropy_rows(rng):
    z = _leaf(rng, 4, 4, lo=-2.0, hi=2.0)
    c = _const(rng, 4)

    def fn():
        p = ad.masked_temperature_softmax(z, None, 1.0)
        return _weighted(ad.entropy_rows(p), c)

    return fn, {"z": z}


def _case_cross_entropy(rng):
    z = _leaf(rng, 2, 3, 6, lo=-2.0, hi=2.0)
    y = rng.integers(0, 6, size=(2, 3))
    return lambda: ad.cross_entropy(z, y), {"z": z}


def _tiny_model_case(arch_name, **overrides):
    def build(rng):
        cfg = make_config(arch_name, L=2, H=2, d=8, T=4, vocab_size=9, **overrides)
        params = init_params(cfg, seed=int(rng.integers(0, 2**31)))
        # freeze power-iteration vectors after a short warm-up, so spectral
        # slots differentiate the exact smooth map W -> W / (u^T W v)
        spectral_refresh(params, iters=5)
        params.training = False
        params.eval_power_iters = 0
        tokens = rng.integers(0, 9, size=(1, 4))
        targets = rng.integers(0, 9, size=(1, 4))

        def fn():
            trace = model_forward(params, tokens, want_attention=False)
            return ad.cross_entropy(trace.logits, targets)

        return fn, dict(params.tensors)

    return build


def _case_scaled_fused_alpha_beta(rng):
    # isolates d/d(alpha), d/d(beta) through the fused block
    cfg = make_config("sm_scfuffn", L=1, H=2, d=8, T=4, vocab_size=9)
    params = init_params(cfg, seed=int(rng.integers(0, 2**31)))
    params.tensors["layers.0.ffn.alpha"].data[...] = rng.uniform(0.7, 1.5)
    params.tensors["layers.0.ffn.beta"].data[...] = rng.uniform(0.7, 1.5)
    tokens = rng.integers(0, 9, size=(1, 4))
    targets = rng.integers(0, 9, size=(1, 4))

    def fn():
        trace = model_forward(params, tokens, want_attention=False)
        return ad.cross_entropy(trace.logits, targets)

    keep = {k: v for k, v in params.tensors.items() if "alpha" in k or "beta" in k}
    return fn, keep


def _case_reg_loss_theta(rng):
    cfg = make_config("smt_scfuffn", L=2, H=2, d=8, T=4, vocab_size=9)
    params = init_params(cfg, seed=int(rng.integers(0, 2**31)))
    theta = ThresholdParams(cfg.L, cfg.H, init=0.5)
    # spread thresholds so every |deviation| sits far from the gate boundary
    theta.theta.data[:] = rng.uniform(0.05, 0.12, size=theta.theta.data.shape)
    reg_cfg = RegConfig(lam=1e-5, gamma=0.2)
    tokens = rng.integers(0, 9, size=(1, 4))

    def fn():
        trace = model_forward(params, tokens, want_attention=True)
        return reg_loss(trace, theta, reg_cfg, cfg.T)

    names = dict(params.tensors)
    names["reg.theta"] = theta.theta
    return fn, names


CASES = {
    "add": _case_add,
    "add_broadcast": _case_add_broadcast,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "scale": _case_scale,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "exp": _case_exp,
    "log": _case_log,
    "sqrt": _case_sqrt,
    "square": _case_square,
    "abs": _case_abs,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "softplus": _case_softplus,
    "reciprocal_clamped": _case_reciprocal_clamped,
    "sum_axes": _case_sum_axes,
    "mean": _case_mean,
    "transpose": _case_transpose,
    "transpose_last": _case_transpose_last,
    "reshape": _case_reshape,
    "slice": _case_slice,
    "concat": _case_concat,
    "embedding": _case_embedding,
    "layernorm": _case_layernorm,
    "softmax": _case_softmax_logits,
    "softmax_temperature": _case_softmax_temperature,
    "entropy": _case_entropy_rows,
    "cross_entropy": _case_cross_entropy,
    "model_baseline": _tiny_model_case("sm_ln_g"),
    "model_temperature": _tiny_model_case("smt_scfuffn"),
    "model_weightnorm": _tiny_model_case("sm", norm_alternative="weight_norm", norm_target_set="QKVO+FFN"),
    "model_spectralnorm": _tiny_model_case("sm", norm_alternative="spectral_norm", norm_target_set="FFN"),
    "scaled_fused_alpha_beta": _case_scaled_fused_alpha_beta,
    "reg_loss": _case_reg_loss_theta,
}


def run(op_filter=None, seed=0):
    """Run all (or one named) gradient-check cases; returns CaseResult list."""
    if op_filter is not None:
        if op_filter not in CASES:
            raise KeyError(
                f"unknown gradcheck case {op_filter!r}; valid: {', '.join(sorted(CASES))}"
            )
        names = [op_filter]
    else:
        names = list(CASES)
    return [check_case(n, CASES[n], seed=seed) for n in names]


def report(results, out=print):
    worst = 0.0
    for r in results:
        status = "pass" if r.ok else "FAIL"
        out(f"{status}  {r.name:<28s} max_rel_err={r.max_rel_err:.3e}  ({r.seconds:.2f}s)")
        worst = max(worst, r.max_rel_err)
    ok = all(r.ok for r in results)
    out(f"{'PASS' if ok else 'FAIL'}: {len(results)} cases, worst relative error {worst:.3e}")
    return ok
