"""Hot numeric kernels with twin implementations: pure numpy and numba @njit.

The active backend is chosen by the ENTLAB_KERNELS environment variable:

    auto   - numba when importable, numpy otherwise (default)
    numba  - require numba, fail loudly if it is missing
    numpy  - force the pure-numpy path

Every kernel here is a pure function from contiguous float64 arrays to new
arrays; the autodiff layer owns graph bookkeeping. Forward/backward pairs are
kept adjacent so the math stays reviewable side by side. Parity between the
two backends is enforced by tests, not assumed.
"""

import math
import os

import numpy as np

try:
    import numba as nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on numba-free installs
    nb = None
    HAS_NUMBA = False

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

_tril_cache: dict = {}


def _tril(T):
    m = _tril_cache.get(T)
    if m is None:
        m = np.tril(np.ones((T, T), dtype=bool))
        _tril_cache[T] = m
    return m


# ---------------------------------------------------------------- numpy impls


def _softmax_fwd_np(z, t, scale, causal):
    # z: [N,T,T] scores, t: [N,T] per-query temperature, scale: 1/sqrt(d_k)
    f = scale / t
    u = z * f[:, :, None]
    if causal:
        u = np.where(_tril(z.shape[1]), u, -np.inf)
    m = np.max(u, axis=2, keepdims=True)
    e = np.exp(u - m)
    s = np.sum(e, axis=2, keepdims=True)
    return e / s


def _softmax_bwd_np(z, p, t, scale, causal, dp):
    # masked entries carry p == 0, so du vanishes there and z is never read
    dot = np.sum(dp * p, axis=2, keepdims=True)
    du = p * (dp - dot)
    f = scale / t
    dz = du * f[:, :, None]
    dt = -np.sum(du * z, axis=2) * scale / (t * t)
    return dz, dt


def _layernorm_fwd_np(x, g, b, eps):
    mu = np.mean(x, axis=1)
    xc = x - mu[:, None]
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * g + b
    return y, mu, rstd


def _layernorm_bwd_np(x, g, mu, rstd, dy):
    xhat = (x - mu[:, None]) * rstd[:, None]
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dxh = dy * g
    m1 = np.mean(dxh, axis=1, keepdims=True)
    m2 = np.mean(dxh * xhat, axis=1, keepdims=True)
    dx = rstd[:, None] * (dxh - m1 - xhat * m2)
    return dx, dg, db


def _gelu_fwd_np(x):
    inner = GELU_C * (x + GELU_K * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_bwd_np(x, dy):
    inner = GELU_C * (x + GELU_K * x * x * x)
    th = np.tanh(inner)
    sech2 = 1.0 - th * th
    d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return dy * d


def _entropy_rows_fwd_np(p, eps):
    # per-query-row entropy: -sum_j p*log(max(p, eps)); zero entries contribute
    # exactly 0 and entries >= eps see the exact log, so closed forms hold to
    # float precision while gradients stay bounded near zero
    terms = np.where(p > 0.0, p * np.log(np.maximum(p, eps)), 0.0)
    return -np.sum(terms, axis=2)


def _entropy_rows_bwd_np(p, eps, de):
    # d/dp [p log max(p,eps)] = log p + 1 above the floor, log eps below it
    d = np.where(
        p >= eps,
        -(np.log(np.maximum(p, eps)) + 1.0),
        np.where(p > 0.0, -math.log(eps), 0.0),
    )
    return d * de[:, :, None]


# ---------------------------------------------------------------- numba impls

if HAS_NUMBA:

    @nb.njit(cache=True)
    def _softmax_fwd_nb(z, t, scale, causal):
        N, T, _ = z.shape
        p = np.zeros_like(z)
        for n in range(N):
            for i in range(T):
                hi = i + 1 if causal else T
                f = scale / t[n, i]
                m = -1.0e300
                for j in range(hi):
                    u = z[n, i, j] * f
                    if u > m:
                        m = u
                s = 0.0
                for j in range(hi):
                    e = math.exp(z[n, i, j] * f - m)
                    p[n, i, j] = e
                    s += e
                inv = 1.0 / s
                for j in range(hi):
                    p[n, i, j] *= inv
        return p

    @nb.njit(cache=True)
    def _softmax_bwd_nb(z, p, t, scale, causal, dp):
        N, T, _ = z.shape
        dz = np.zeros_like(z)
        dt = np.zeros_like(t)
        for n in range(N):
            for i in range(T):
                hi = i + 1 if causal else T
                f = scale / t[n, i]
                dot = 0.0
                for j in range(hi):
                    dot += dp[n, i, j] * p[n, i, j]
                acc = 0.0
                for j in range(hi):
                    du = p[n, i, j] * (dp[n, i, j] - dot)
                    dz[n, i, j] = du * f
                    acc += du * z[n, i, j]
                dt[n, i] = -acc * scale / (t[n, i] * t[n, i])
        return dz, dt

    @nb.njit(cache=True)
    def _layernorm_fwd_nb(x, g, b, eps):
        N, d = x.shape
        y = np.empty_like(x)
        mu = np.empty(N)
        rstd = np.empty(N)
        for n in range(N):
            s = 0.0
            for j in range(d):
                s += x[n, j]
            m = s / d
            v = 0.0
            for j in range(d):
                c = x[n, j] - m
                v += c * c
            r = 1.0 / math.sqrt(v / d + eps)
            mu[n] = m
            rstd[n] = r
            for j in range(d):
                y[n, j] = (x[n, j] - m) * r * g[j] + b[j]
        return y, mu, rstd

    @nb.njit(cache=True)
    def _layernorm_bwd_nb(x, g, mu, rstd, dy):
        N, d = x.shape
        dx = np.empty_like(x)
        dg = np.zeros(d)
        db = np.zeros(d)
        for n in range(N):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xhat = (x[n, j] - mu[n]) * rstd[n]
                dxh = dy[n, j] * g[j]
                m1 += dxh
                m2 += dxh * xhat
                dg[j] += dy[n, j] * xhat
                db[j] += dy[n, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                xhat = (x[n, j] - mu[n]) * rstd[n]
                dxh = dy[n, j] * g[j]
                dx[n, j] = rstd[n] * (dxh - m1 - xhat * m2)
        return dx, dg, db

    @nb.njit(cache=True)
    def _gelu_fwd_nb(x):
        y = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            inner = GELU_C * (v + GELU_K * v * v * v)
            y[i] = 0.5 * v * (1.0 + math.tanh(inner))
        return y

    @nb.njit(cache=True)
    def _gelu_bwd_nb(x, dy):
        dx = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            inner = GELU_C * (v + GELU_K * v * v * v)
            th = math.tanh(inner)
            sech2 = 1.0 - th * th
            dx[i] = dy[i] * (
                0.5 * (1.0 + th) + 0.5 * v * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
            )
        return dx

    @nb.njit(cache=True)
    def _entropy_rows_fwd_nb(p, eps):
        N, T, _ = p.shape
        e = np.zeros((N, T))
        for n in range(N):
            for i in range(T):
                acc = 0.0
                for j in range(T):
                    v = p[n, i, j]
                    if v > 0.0:
                        acc += v * math.log(v if v > eps else eps)
                e[n, i] = -acc
        return e

    @nb.njit(cache=True)
    def _entropy_rows_bwd_nb(p, eps, de):
        N, T, _ = p.shape
        dp = np.zeros_like(p)
        for n in range(N):
            for i in range(T):
                for j in range(T):
                    v = p[n, i, j]
                    if v >= eps:
                        dp[n, i, j] = -(math.log(v) + 1.0) * de[n, i]
                    elif v > 0.0:
                        dp[n, i, j] = -math.log(eps) * de[n, i]
        return dp


# ------------------------------------------------------------------ dispatch

_NP_IMPLS = {
    "softmax_fwd": _softmax_fwd_np,
    "softmax_bwd": _softmax_bwd_np,
    "layernorm_fwd": _layernorm_fwd_np,
    "layernorm_bwd": _layernorm_bwd_np,
    "gelu_fwd": _gelu_fwd_np,
    "gelu_bwd": _gelu_bwd_np,
    "entropy_rows_fwd": _entropy_rows_fwd_np,
    "entropy_rows_bwd": _entropy_rows_bwd_np,
}

if HAS_NUMBA:
    _NB_IMPLS = {
        "softmax_fwd": _softmax_fwd_nb,
        "softmax_bwd": _softmax_bwd_nb,
        "layernorm_fwd": _layernorm_fwd_nb,
        "layernorm_bwd": _layernorm_bwd_nb,
        "gelu_fwd": _gelu_fwd_nb,
        "gelu_bwd": _gelu_bwd_nb,
        "entropy_rows_fwd": _entropy_rows_fwd_nb,
        "entropy_rows_bwd": _entropy_rows_bwd_nb,
    }
else:
    _NB_IMPLS = {}

_active = dict(_NP_IMPLS)
_backend = "numpy"


def set_backend(name):
    """Select the kernel backend: 'auto', 'numba', or 'numpy'."""
    global _backend
    if name == "auto":
        name = "numba" if HAS_NUMBA else "numpy"
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("ENTLAB_KERNELS=numba but numba is not importable")
        _active.update(_NB_IMPLS)
    elif name == "numpy":
        _active.update(_NP_IMPLS)
    else:
        raise ValueError(f"unknown kernel backend {name!r} (want auto|numba|numpy)")
    _backend = name
    return name


def get_backend():
    return _backend


set_backend(os.environ.get("ENTLAB_KERNELS", "auto"))


def _c(a):
    # numba kernels require contiguous input; cheap no-op when already so
    return np.ascontiguousarray(a)


def softmax_fwd(z, t, scale, causal):
    """Row-wise temperature softmax over [N,T,T] scores, optionally causal.

    Entry (i,j) uses weight exp(z_ij * scale / t_i); masked entries (j > i
    under the causal mask) come out exactly 0. Rows are stabilized by max
    subtraction before exponentiation.
    """
    return _active["softmax_fwd"](_c(z), _c(t), float(scale), bool(causal))


def softmax_bwd(z, p, t, scale, causal, dp):
    """Exact softmax Jacobian product; returns (dz, dt)."""
    return _active["softmax_bwd"](
        _c(z), _c(p), _c(t), float(scale), bool(causal), _c(dp)
    )


def layernorm_fwd(x, g, b, eps):
    """Per-row layer normalization of [N,d] with affine gain/bias.

    Returns (y, mean, rstd); mean/rstd are cached for the backward pass.
    """
    return _active["layernorm_fwd"](_c(x), _c(g), _c(b), float(eps))


def layernorm_bwd(x, g, mu, rstd, dy):
    return _active["layernorm_bwd"](_c(x), _c(g), _c(mu), _c(rstd), _c(dy))


def gelu_fwd(x):
    """tanh-approximation gelu on a flat array."""
    return _active["gelu_fwd"](_c(x))


def gelu_bwd(x, dy):
    return _active["gelu_bwd"](_c(x), _c(dy))


def entropy_rows_fwd(p, eps):
    """Per-query-row attention entropy of [N,T,T] probabilities.

    Computes -sum_j p_ij * log(max(p_ij, eps)) per row; entries with p == 0
    (masked positions) contribute exactly 0 and are never evaluated, and the
    floor keeps gradients bounded without biasing entries above eps.
    """
    return _active["entropy_rows_fwd"](_c(p), float(eps))


def entropy_rows_bwd(p, eps, de):
    return _active["entropy_rows_bwd"](_c(p), float(eps), _c(de))


def warmup():
    """Force-compile the active kernel set on tiny inputs (numba JIT warmth)."""
    z = np.zeros((1, 2, 2))
    t = np.ones((1, 2))
    p = softmax_fwd(z, t, 1.0, True)
    softmax_bwd(z, p, t, 1.0, True, p)
    x = np.zeros((2, 3))
    y, mu, rs = layernorm_fwd(x, np.ones(3), np.zeros(3), 1e-5)
    layernorm_bwd(x, np.ones(3), mu, rs, y)
    f = np.zeros(4)
    gelu_bwd(f, gelu_fwd(f))
    e = entropy_rows_fwd(p, 1e-9)
    entropy_rows_bwd(p, 1e-9, e)
