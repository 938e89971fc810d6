"""Configurable decoder-only transformer with reduced-nonlinearity variants.

Supported knobs: gelu / relu / identity / scaled-fused FFN, optional pre-LN
layernorm, learnable per-head per-position softmax temperatures, and
weight-norm / spectral-norm reparameterizations of selected projections as
static layernorm replacements. Every forward pass can capture per-layer,
per-head post-softmax attention probabilities for entropy analysis, and live
counters track how many softmax / layernorm / gelu / relu instances actually
ran.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


FFN_KINDS = ("gelu", "relu", "identity", "scaled_fused")
NORM_ALTERNATIVES = ("none", "weight_norm", "spectral_norm")
NORM_TARGET_SETS = ("QK", "FFN", "QK+FFN", "QKV+FFN", "QKVO+FFN")

TEMPERATURE_FLOOR = 1e-4
ALPHA_MIN_ABS = 1e-6
EVAL_POWER_ITERS = 30

# live nonlinearity counters (architecture-level instances, batch-agnostic)
OP_COUNTS = {"softmax": 0, "layernorm": 0, "gelu": 0, "relu": 0}


def reset_op_counts():
    for k in OP_COUNTS:
        OP_COUNTS[k] = 0


def _bump(kind, n=1):
    OP_COUNTS[kind] += n


@dataclass
class ArchConfig:
    L: int
    H: int
    d: int
    T: int
    vocab_size: int
    ffn_kind: str = "gelu"
    use_layernorm: bool = True
    learnable_temperature: bool = False
    norm_alternative: str = "none"
    norm_target_set: str = "FFN"
    temperature_init: float = 1e-2

    @property
    def d_k(self):
        return self.d // self.H

    def validate(self):
        # L = 0 is a legal degenerate stack (embed -> unembed only)
        if not isinstance(self.L, int) or self.L < 0:
            raise ConfigError(f"arch field L must be a non-negative integer, got {self.L!r}")
        for name in ("H", "d", "T", "vocab_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"arch field {name} must be a positive integer, got {v!r}")
        if self.d % self.H != 0:
            raise ConfigError(f"d={self.d} not divisible by H={self.H}")
        if self.ffn_kind not in FFN_KINDS:
            raise ConfigError(f"unknown ffn_kind {self.ffn_kind!r}, want one of {FFN_KINDS}")
        if self.norm_alternative not in NORM_ALTERNATIVES:
            raise ConfigError(
                f"unknown norm_alternative {self.norm_alternative!r}, want one of {NORM_ALTERNATIVES}"
            )
        if self.norm_target_set not in NORM_TARGET_SETS:
            raise ConfigError(
                f"unknown norm_target_set {self.norm_target_set!r}, want one of {NORM_TARGET_SETS}"
            )
        if self.norm_alternative != "none" and self.use_layernorm:
            raise ConfigError(
                "norm_alternative replaces layernorm and requires use_layernorm=false"
            )
        if not (self.temperature_init > 0):
            raise ConfigError("temperature_init must be > 0")
        return self

    def to_dict(self):
        return asdict(self)


# Named architecture rows: progressive nonlinearity removal plus the
# scaled-fused variants. Keys are the CLI names.
NAMED_CONFIGS = {
    "sm_ln_g": dict(ffn_kind="gelu", use_layernorm=True, learnable_temperature=False),
    "sm_ln_r": dict(ffn_kind="relu", use_layernorm=True, learnable_temperature=False),
    "sm_ln": dict(ffn_kind="identity", use_layernorm=True, learnable_temperature=False),
    "sm_g": dict(ffn_kind="gelu", use_layernorm=False, learnable_temperature=False),
    "sm_r": dict(ffn_kind="relu", use_layernorm=False, learnable_temperature=False),
    "sm": dict(ffn_kind="identity", use_layernorm=False, learnable_temperature=False),
    "sm_scfuffn": dict(ffn_kind="scaled_fused", use_layernorm=False, learnable_temperature=False),
    "smt_scfuffn": dict(ffn_kind="scaled_fused", use_layernorm=False, learnable_temperature=True),
}


def make_config(name, L=4, H=4, d=128, T=64, vocab_size=256, **overrides):
    if name not in NAMED_CONFIGS:
        raise ConfigError(
            f"unknown architecture {name!r}; valid names: {', '.join(NAMED_CONFIGS)}"
        )
    kw = dict(NAMED_CONFIGS[name])
    kw.update(overrides)
    return ArchConfig(L=L, H=H, d=d, T=T, vocab_size=vocab_size, **kw).validate()


# ------------------------------------------------------------- weight slots


class PlainSlot:
    def __init__(self, t):
        self.t = t

    def effective(self, training, eval_iters=EVAL_POWER_ITERS):
        return self.t


class WeightNormSlot:
    """W = g * V / ||V|| with one gain per output unit.

    V is stored output-major ([out, in], or [H, d_k, d] for head blocks) so
    each output unit is a row and g_j is the exact Euclidean norm of row j of
    the effective matrix. effective() transposes back to the input-major
    orientation the forward pass multiplies by. Row norms must stay nonzero;
    initialization copies a dense gaussian matrix, which guarantees it.
    """

    def __init__(self, v, g):
        self.v = v
        self.g = g

    def effective_output_major(self):
        norms = ad.sqrt(ad.sum_(ad.square(self.v), axis=-1, keepdims=True))
        return ad.mul(self.v, ad.div(self.g, norms))

    def effective(self, training, eval_iters=EVAL_POWER_ITERS):
        return ad.transpose_last(self.effective_output_major())


class SpectralNormSlot:
    """W / sigma_hat with sigma_hat from power iteration.

    u, v are persistent estimate vectors (per head block for 3-D weights).
    Training forwards advance them one iteration and persist; evaluation
    forwards run `eval_iters` refinement steps on local copies so analysis
    never perturbs the training trajectory. sigma = u^T W v enters the graph
    with u, v held constant, so gradients flow through both the numerator
    and the 1/sigma factor.
    """

    def __init__(self, w, u, v):
        self.w = w
        self.u = u
        self.v = v

    def power_iterate(self, iters, persist):
        W = self.w.data
        u, v = self.u, self.v
        for _ in range(iters):
            v = np.matmul(np.expand_dims(u, -2), W)[..., 0, :]
            v = v / (np.linalg.norm(v, axis=-1, keepdims=True) + 1e-12)
            u = np.matmul(W, np.expand_dims(v, -1))[..., 0]
            u = u / (np.linalg.norm(u, axis=-1, keepdims=True) + 1e-12)
        if persist:
            self.u, self.v = u, v
        return u, v

    def sigma_estimate(self, u=None, v=None):
        u = self.u if u is None else u
        v = self.v if v is None else v
        uv = np.expand_dims(u, -1) * np.expand_dims(v, -2)
        return np.sum(self.w.data * uv, axis=(-2, -1))

    def effective(self, training, eval_iters=EVAL_POWER_ITERS):
        if training:
            u, v = self.power_iterate(1, persist=True)
        else:
            u, v = self.power_iterate(eval_iters, persist=False)
        outer = np.expand_dims(u, -1) * np.expand_dims(v, -2)
        sigma = ad.sum_(ad.mul(self.w, Tensor(outer)), axis=(-2, -1), keepdims=True)
        return ad.div(self.w, sigma)


def spectral_sigma_history(W, u0, iters):
    """sigma_hat after each of `iters` power-iteration steps on a 2-D matrix."""
    u = u0 / (np.linalg.norm(u0) + 1e-12)
    hist = []
    for _ in range(iters):
        v = W.T @ u
        v = v / (np.linalg.norm(v) + 1e-12)
        u = W @ v
        u = u / (np.linalg.norm(u) + 1e-12)
        hist.append(float(u @ W @ v))
    return hist


# ------------------------------------------------------------- model params


class ModelParams:
    """All learnable tensors plus normalization slot wrappers.

    tensors: name -> Tensor, insertion-ordered (the checkpoint order).
    buffers: name -> ndarray (spectral-norm u/v estimates; saved, not trained).
    slots:   logical matrix name -> Plain/WeightNorm/SpectralNorm wrapper.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.training = True
        self.eval_power_iters = EVAL_POWER_ITERS
        self.tensors = {}
        self.slots = {}

    def weight(self, name):
        return self.slots[name].effective(self.training, self.eval_power_iters)

    def named_tensors(self):
        return self.tensors

    def named_buffers(self):
        # spectral u/v live on the slots (power iteration rebinds them)
        out = {}
        for name, slot in self.slots.items():
            if isinstance(slot, SpectralNormSlot):
                out[f"{name}.u"] = slot.u
                out[f"{name}.v"] = slot.v
        return out

    def all_finite(self):
        return all(not t.has_nonfinite() for t in self.tensors.values())


def tau_init_value(t0):
    # softplus(tau0) + floor == t0  =>  tau0 = log(expm1(t0 - floor))
    return float(np.log(np.expm1(t0 - TEMPERATURE_FLOOR)))


def _norm_targets(cfg):
    if cfg.norm_alternative == "none":
        return set()
    tags = set()
    for part in cfg.norm_target_set.split("+"):
        if part == "FFN":
            tags.add("FFN")
        else:
            tags.update(part)  # "QKVO" -> {"Q","K","V","O"}
    return tags


def init_params(cfg, seed):
    """Deterministic parameter initialization: gaussian(0, 0.02) weights,
    unit layernorm gains / zero biases, alpha = beta = 1, temperatures at
    cfg.temperature_init via the softplus reparameterization."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ModelParams(cfg)
    targets = _norm_targets(cfg)

    def plain(name, shape):
        t = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)
        p.tensors[name] = t
        p.slots[name] = PlainSlot(t)

    def matrix(name, shape, tag):
        if tag not in targets:
            plain(name, shape)
        elif cfg.norm_alternative == "weight_norm":
            out_major = shape[:-2] + (shape[-1], shape[-2])
            v = Tensor(rng.normal(0.0, 0.02, out_major), requires_grad=True)
            g = Tensor(np.linalg.norm(v.data, axis=-1, keepdims=True), requires_grad=True)
            p.tensors[name + ".v"] = v
            p.tensors[name + ".g"] = g
            p.slots[name] = WeightNormSlot(v, g)
        else:  # spectral_norm
            w = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)
            u = rng.normal(size=shape[:-1])
            u = u / (np.linalg.norm(u, axis=-1, keepdims=True) + 1e-12)
            v = rng.normal(size=shape[:-2] + (shape[-1],))
            v = v / (np.linalg.norm(v, axis=-1, keepdims=True) + 1e-12)
            p.tensors[name + ".w"] = w
            p.slots[name] = SpectralNormSlot(w, u, v)

    d, dk, H, T = cfg.d, cfg.d_k, cfg.H, cfg.T
    plain("tok_emb", (cfg.vocab_size, d))
    plain("pos_emb", (T, d))
    for i in range(cfg.L):
        pre = f"layers.{i}"
        matrix(f"{pre}.attn.wq", (H, d, dk), "Q")
        matrix(f"{pre}.attn.wk", (H, d, dk), "K")
        matrix(f"{pre}.attn.wv", (H, d, dk), "V")
        matrix(f"{pre}.attn.wo", (d, d), "O")
        if cfg.ffn_kind in ("gelu", "relu", "identity"):
            matrix(f"{pre}.ffn.w_in", (d, 4 * d), "FFN")
            matrix(f"{pre}.ffn.w_out", (4 * d, d), "FFN")
        else:
            matrix(f"{pre}.ffn.w", (d, d), "FFN")
            a = Tensor(np.asarray(1.0), requires_grad=True)
            b = Tensor(np.asarray(1.0), requires_grad=True)
            p.tensors[f"{pre}.ffn.alpha"] = a
            p.tensors[f"{pre}.ffn.beta"] = b
        if cfg.use_layernorm:
            for ln in ("ln1", "ln2"):
                p.tensors[f"{pre}.{ln}.g"] = Tensor(np.ones(d), requires_grad=True)
                p.tensors[f"{pre}.{ln}.b"] = Tensor(np.zeros(d), requires_grad=True)
        if cfg.learnable_temperature:
            p.tensors[f"{pre}.tau"] = Tensor(
                np.full((H, T), tau_init_value(cfg.temperature_init)), requires_grad=True
            )
    if cfg.use_layernorm:
        p.tensors["final_ln.g"] = Tensor(np.ones(d), requires_grad=True)
        p.tensors["final_ln.b"] = Tensor(np.zeros(d), requires_grad=True)
    plain("unembed", (d, cfg.vocab_size))
    return p


def spectral_refresh(params, iters=EVAL_POWER_ITERS):
    """Persistently tighten every spectral-norm estimate (checkpoint load path)."""
    for slot in params.slots.values():
        if isinstance(slot, SpectralNormSlot):
            slot.power_iterate(iters, persist=True)


def current_temperatures(params):
    """Effective temperatures as a plain [L,H,T] array, or None if fixed."""
    cfg = params.cfg
    if not cfg.learnable_temperature:
        return None
    out = np.empty((cfg.L, cfg.H, cfg.T))
    for i in range(cfg.L):
        tau = params.tensors[f"layers.{i}.tau"].data
        out[i] = np.logaddexp(0.0, tau) + TEMPERATURE_FLOOR
    return out


# ------------------------------------------------------------------ forward


@dataclass
class ForwardTrace:
    logits: Tensor
    attention: list = field(default_factory=list)  # [L][H] Tensor [B,T,T]
    temperatures: list = field(default_factory=list)  # [L] Tensor [H,T] or None
    hidden: list = field(default_factory=list)  # optional per-layer streams


def attention_head(x, wq, wk, wv, t_row=None, causal=True):
    """Single attention head: probs = softmax(scale * (xWq)(xWk)^T), out = probs (xWv).

    x: [T,d] or [B,T,d]; wq/wk/wv: [d,d_k]. t_row is the per-query temperature
    vector (fixed 1 when None). Returns (out, probs).
    """
    wq, wk, wv = ad._wrap(wq), ad._wrap(wk), ad._wrap(wv)
    dk = wq.data.shape[-1]
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    scores = ad.matmul(q, ad.transpose_last(k))
    probs = ad.masked_temperature_softmax(scores, t_row, 1.0 / math.sqrt(dk), causal)
    _bump("softmax")
    out = ad.matmul(probs, v)
    return out, probs


def _layer_temperature(params, i, Tc):
    cfg = params.cfg
    if not cfg.learnable_temperature:
        return None
    tau = params.tensors[f"layers.{i}.tau"]
    t = ad.add(
        ad.softplus(ad.static_slice(tau, (slice(None), slice(0, Tc)))), TEMPERATURE_FLOOR
    )
    return t  # [H, Tc]


def mha(x, params, i, want_attention=True):
    """All-heads attention via one batched matmul chain over [H,d,d_k] blocks.

    Equivalent to running attention_head per head and concatenating (the
    equality is tested against that brute-force loop). Returns the projected
    output, the per-head probability slices, and the temperature tensor.
    """
    cfg = params.cfg
    B, Tc, d = x.data.shape
    H, dk = cfg.H, cfg.d_k
    wq = params.weight(f"layers.{i}.attn.wq")
    wk = params.weight(f"layers.{i}.attn.wk")
    wv = params.weight(f"layers.{i}.attn.wv")
    wo = params.weight(f"layers.{i}.attn.wo")
    xb = ad.reshape(x, (B, 1, Tc, d))
    q = ad.matmul(xb, wq)  # [B,H,Tc,dk]
    k = ad.matmul(xb, wk)
    v = ad.matmul(xb, wv)
    scores = ad.matmul(q, ad.transpose_last(k))  # [B,H,Tc,Tc]
    t = _layer_temperature(params, i, Tc)
    probs = ad.masked_temperature_softmax(scores, t, 1.0 / math.sqrt(dk), causal=True)
    _bump("softmax", H)
    ctx = ad.matmul(probs, v)  # [B,H,Tc,dk]
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Tc, d))
    out = ad.matmul(merged, wo)
    head_probs = None
    if want_attention:
        head_probs = [ad.static_slice(probs, (slice(None), h)) for h in range(H)]
    return out, head_probs, t


def ffn(x, params, i):
    cfg = params.cfg
    kind = cfg.ffn_kind
    pre = f"layers.{i}.ffn"
    if kind in ("gelu", "relu"):
        h = ad.matmul(x, params.weight(f"{pre}.w_in"))
        a = ad.gelu(h) if kind == "gelu" else ad.relu(h)
        _bump(kind)
        return ad.matmul(a, params.weight(f"{pre}.w_out"))
    if kind == "identity":
        return ad.matmul(ad.matmul(x, params.weight(f"{pre}.w_in")), params.weight(f"{pre}.w_out"))
    if kind == "scaled_fused":
        return ad.matmul(x, params.weight(f"{pre}.w"))
    raise ConfigError(f"ffn weights for layer {i} do not match kind {kind!r}")


def _maybe_ln(x, params, name):
    if not params.cfg.use_layernorm:
        return x
    _bump("layernorm")
    return ad.layernorm(x, params.tensors[name + ".g"], params.tensors[name + ".b"])


def block_forward(x, params, i, want_attention=True):
    """Pre-LN residual block; scaled-fused kind combines the streams as
    x_out = beta * x_sa + (1/alpha) * FFN(x_sa_normed), alpha clamped to
    |alpha| >= 1e-6 at the use site."""
    cfg = params.cfg
    attn_out, head_probs, t = mha(_maybe_ln(x, params, f"layers.{i}.ln1"), params, i, want_attention)
    x_sa = ad.add(x, attn_out)
    f_out = ffn(_maybe_ln(x_sa, params, f"layers.{i}.ln2"), params, i)
    if cfg.ffn_kind == "scaled_fused":
        alpha = params.tensors[f"layers.{i}.ffn.alpha"]
        beta = params.tensors[f"layers.{i}.ffn.beta"]
        inv_a = ad.reciprocal_clamped(alpha, ALPHA_MIN_ABS)
        x_out = ad.add(ad.mul(beta, x_sa), ad.mul(inv_a, f_out))
    else:
        x_out = ad.add(x_sa, f_out)
    return x_out, head_probs, t


def model_forward(params, tokens, want_attention=True, keep_hidden=False):
    """Embed, run L blocks, final layernorm iff configured, unembed.

    tokens: int array [B,T_cur] (or [T_cur], promoted to batch 1) with
    T_cur <= cfg.T. Returns a ForwardTrace whose attention list holds the
    post-softmax probabilities per (layer, head).
    """
    cfg = params.cfg
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B,T], got shape {tokens.shape}")
    B, Tc = tokens.shape
    if Tc > cfg.T:
        raise ValueError(f"sequence length {Tc} exceeds configured context {cfg.T}")
    x = ad.add(
        ad.embedding(params.tensors["tok_emb"], tokens),
        ad.static_slice(params.tensors["pos_emb"], (slice(0, Tc),)),
    )
    trace = ForwardTrace(logits=None)
    for i in range(cfg.L):
        x, head_probs, t = block_forward(x, params, i, want_attention)
        if want_attention:
            trace.attention.append(head_probs)
            trace.temperatures.append(t)
        if keep_hidden:
            trace.hidden.append(x)
    x = _maybe_ln(x, params, "final_ln")
    trace.logits = ad.matmul(x, params.tensors["unembed"])
    return trace
