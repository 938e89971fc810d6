"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Tensors form an implicit DAG: each op output records its parent tensors and a
backward closure. backward() seeds the output gradient, walks the graph in
reverse topological order, and accumulates gradients additively, so fan-out
is handled naturally and repeated backward calls without zero_grad accumulate.

Heavy pointwise kernels (softmax, layernorm, gelu, entropy) are delegated to
the kernels module, which owns the numpy/numba backend choice.
"""

import numpy as np

from . import kernels as K

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def has_nonfinite(self):
        """Queryable NaN/Inf state; construction and ops never raise on them."""
        return not bool(np.all(np.isfinite(self.data)))

    def assert_finite(self, what="tensor"):
        if self.has_nonfinite():
            raise FloatingPointError(f"{what} contains NaN or Inf")
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _acc(t, g):
    # additive accumulation across fan-out; g must already match t's shape
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = g.reshape(shape)
    return g


def backward(loss, grad=None):
    """Reverse-mode sweep from `loss`; accumulates into .grad of every node."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss or an explicit seed gradient, got shape {loss.data.shape}"
            )
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    # iterative topological order (post-order DFS), visit each node exactly once
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    _acc(loss, grad)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ------------------------------------------------------------ arithmetic ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def scale(a, s):
    a = _wrap(a)
    s = float(s)
    data = a.data * s

    def bwd(g):
        _acc(a, g * s)

    return _make(data, (a,), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions do not match: {a.data.shape} @ {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _acc(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _acc(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd)


# ------------------------------------------------------------- pointwise ops


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * data)

    return _make(data, (a,), bwd)


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log domain error: non-positive input (add an epsilon first)")
    data = np.log(a.data)

    def bwd(g):
        _acc(a, g / a.data)

    return _make(data, (a,), bwd)


def sqrt(a):
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt domain error: negative input")
    data = np.sqrt(a.data)

    def bwd(g):
        _acc(a, g * 0.5 / data)

    return _make(data, (a,), bwd)


def square(a):
    a = _wrap(a)
    data = a.data * a.data

    def bwd(g):
        _acc(a, g * 2.0 * a.data)

    return _make(data, (a,), bwd)


def abs_(a):
    a = _wrap(a)
    data = np.abs(a.data)

    def bwd(g):
        # subgradient 0 at 0 (sign(0) == 0)
        _acc(a, g * np.sign(a.data))

    return _make(data, (a,), bwd)


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        # subgradient 0 at 0
        _acc(a, g * (a.data > 0.0))

    return _make(data, (a,), bwd)


def gelu(a):
    a = _wrap(a)
    flat = np.ascontiguousarray(a.data.reshape(-1))
    data = K.gelu_fwd(flat).reshape(a.data.shape)

    def bwd(g):
        dx = K.gelu_bwd(flat, np.ascontiguousarray(g.reshape(-1)))
        _acc(a, dx.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def softplus(a):
    a = _wrap(a)
    data = np.logaddexp(0.0, a.data)

    def bwd(g):
        # sigmoid via tanh: overflow-safe at both ends
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        _acc(a, g * sig)

    return _make(data, (a,), bwd)


def reciprocal_clamped(a, min_abs=1e-6):
    """1 / clamp(a) where clamp pushes |a| up to at least min_abs.

    Exact derivative: zero inside the clamped region (the output is constant
    in a there), -1/a^2 elsewhere.
    """
    a = _wrap(a)
    sgn = np.where(a.data < 0.0, -1.0, 1.0)
    clamped = np.where(np.abs(a.data) < min_abs, sgn * min_abs, a.data)
    data = 1.0 / clamped

    def bwd(g):
        inside = np.abs(a.data) >= min_abs
        _acc(a, np.where(inside, -g / (a.data * a.data), 0.0))

    return _make(data, (a,), bwd)


# ------------------------------------------------------------ structural ops


def _norm_axes(axis, ndim):
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    axes = None if axis is None else _norm_axes(axis, a.data.ndim)

    def bwd(g):
        gg = g
        if axes is not None and not keepdims:
            for ax in axes:
                gg = np.expand_dims(gg, ax)
        _acc(a, np.broadcast_to(gg, a.data.shape))

    return _make(np.asarray(data, dtype=np.float64), (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    axes = None if axis is None else _norm_axes(axis, a.data.ndim)
    count = a.data.size if axes is None else int(np.prod([a.data.shape[ax] for ax in axes]))

    def bwd(g):
        gg = g
        if axes is not None and not keepdims:
            for ax in axes:
                gg = np.expand_dims(gg, ax)
        _acc(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make(np.asarray(data, dtype=np.float64), (a,), bwd)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _acc(a, np.transpose(g, inv))

    return _make(data, (a,), bwd)


def transpose_last(a):
    a = _wrap(a)
    data = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        _acc(a, np.swapaxes(g, -1, -2))

    return _make(data, (a,), bwd)


def reshape(a, shape):
    a = _wrap(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def static_slice(a, key):
    """Basic (slice/int tuple) indexing; backward scatters into the source.

    Elements outside the slice receive zero gradient.
    """
    a = _wrap(a)
    data = a.data[key]

    def bwd(g):
        gz = np.zeros_like(a.data)
        gz[key] = g
        _acc(a, gz)

    return _make(data, (a,), bwd)


def concat_last(tensors):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.data.shape[-1] for t in tensors]

    def bwd(g):
        ofs = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                _acc(t, g[..., ofs : ofs + w])
            ofs += w

    return _make(data, tuple(tensors), bwd)


def embedding(table, ids):
    """Row gather from [V,d] by an integer id array; backward scatter-adds."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"token id out of range: ids in [{ids.min()},{ids.max()}] vs table rows {table.data.shape[0]}"
        )
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _acc(table, gt)

    return _make(data, (table,), bwd)


# --------------------------------------------------------------- fused blocks


def layernorm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with affine gain/bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if d < 2:
        raise ValueError(f"layernorm needs last axis >= 2, got {d}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2, mu, rstd = K.layernorm_fwd(x2, gain.data, bias.data, eps)
    data = y2.reshape(x.data.shape)

    def bwd(g):
        dx2, dg, db = K.layernorm_bwd(
            x2, gain.data, mu, rstd, np.ascontiguousarray(g.reshape(-1, d))
        )
        if x.requires_grad:
            _acc(x, dx2.reshape(x.data.shape))
        if gain.requires_grad:
            _acc(gain, dg)
        if bias.requires_grad:
            _acc(bias, db)

    return _make(data, (x, gain, bias), bwd)


def masked_temperature_softmax(scores, t, scale, causal=True):
    """Temperature softmax over the last axis of [..,T,T] scores.

    Entry (i,j) weight is exp(z_ij * scale / t_i): per-query temperature t_i
    divides the pre-scaled logit. With causal=True, positions j > i are
    masked and come out exactly 0; row i is a distribution over 0..i. The
    backward pass is the exact Jacobian product, including the gradient with
    respect to t. t may be None (fixed 1), [T], or any shape broadcastable
    to scores.shape[:-1].
    """
    scores = _wrap(scores)
    shp = scores.data.shape
    if scores.data.ndim < 2 or shp[-1] != shp[-2]:
        raise ValueError(f"softmax expects [..,T,T] scores, got {shp}")
    T = shp[-1]
    t_exp_shape = shp[:-1]

    if t is None:
        t_tensor = None
        t_full = np.ones(t_exp_shape)
    else:
        t_tensor = _wrap(t)
        if np.any(t_tensor.data <= 0.0):
            raise ValueError("temperature domain error: t must be strictly positive")
        t_full = np.broadcast_to(t_tensor.data, t_exp_shape)

    z2 = np.ascontiguousarray(scores.data.reshape(-1, T, T))
    t2 = np.ascontiguousarray(t_full.reshape(-1, T))
    p2 = K.softmax_fwd(z2, t2, scale, causal)
    data = p2.reshape(shp)

    parents = (scores,) if t_tensor is None else (scores, t_tensor)

    def bwd(g):
        dz2, dt2 = K.softmax_bwd(z2, p2, t2, scale, causal, np.ascontiguousarray(g.reshape(-1, T, T)))
        if scores.requires_grad:
            _acc(scores, dz2.reshape(shp))
        if t_tensor is not None and t_tensor.requires_grad:
            dt = _unbroadcast(dt2.reshape(t_exp_shape), t_tensor.data.shape)
            _acc(t_tensor, dt)

    return _make(data, parents, bwd)


def entropy_rows(probs, eps=1e-9):
    """Row entropies -sum_j p*log(max(p, eps)) of [..,T,T] probabilities.

    Zero entries (masked positions) contribute exactly 0, and the eps floor
    bounds the gradient for near-zero entries. Output shape is
    probs.shape[:-1].
    """
    probs = _wrap(probs)
    shp = probs.data.shape
    T = shp[-1]
    p2 = np.ascontiguousarray(probs.data.reshape(-1, T, T))
    e2 = K.entropy_rows_fwd(p2, eps)
    data = e2.reshape(shp[:-1])

    def bwd(g):
        dp2 = K.entropy_rows_bwd(p2, eps, np.ascontiguousarray(g.reshape(-1, T)))
        _acc(probs, dp2.reshape(shp))

    return _make(data, (probs,), bwd)


def cross_entropy(logits, targets):
    """Mean token-level cross-entropy from raw logits.

    logits: [..,V]; targets: integer array of matching leading shape. Uses a
    stable log-sum-exp; caches the softmax for the backward pass.
    """
    logits = _wrap(logits)
    V = logits.data.shape[-1]
    l2 = logits.data.reshape(-1, V)
    tg = np.asarray(targets).reshape(-1)
    if tg.size != l2.shape[0]:
        raise ValueError(
            f"cross_entropy target count {tg.size} does not match logit rows {l2.shape[0]}"
        )
    if tg.size and (tg.min() < 0 or tg.max() >= V):
        raise ValueError(f"target id out of range for vocab {V}")
    m = np.max(l2, axis=1)
    lse = m + np.log(np.sum(np.exp(l2 - m[:, None]), axis=1))
    p = np.exp(l2 - lse[:, None])
    n = l2.shape[0]
    data = np.asarray(np.mean(lse - l2[np.arange(n), tg]))

    def bwd(g):
        dl = p.copy()
        dl[np.arange(n), tg] -= 1.0
        dl *= float(g) / n
        _acc(logits, dl.reshape(logits.data.shape))

    return _make(data, (logits,), bwd)
