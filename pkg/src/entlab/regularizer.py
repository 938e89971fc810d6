"""Entropy-deviation regularization with learnable per-head thresholds.

Each head carries a learnable threshold weight theta setting its entropy
target theta * E_max (E_max = log T, the configured context length). The
penalty is the squared deviation from that target, gated off inside a dead
zone of half-width gamma * E_max:

    delta = E - theta * E_max
    penalty = delta^2  if |delta| > gamma * E_max  else 0

averaged over heads within a layer, then over layers. The gate is evaluated
on detached values and treated as a constant in the graph, so the gradient
w.r.t. delta is 2*delta inside the penalized region and exactly 0 elsewhere,
including at the boundary.

The primary semantics threshold the batch-averaged per-head entropy. A
compatibility mode (per_position_listing) instead penalizes each query
position's entropy and sums the penalties, which couples the loss scale to
batch size and sequence length; it exists for comparison runs only.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy import EPS


@dataclass
class RegConfig:
    lam: float = 1e-5
    gamma: float = 0.2
    threshold_init: float = 0.5
    per_position_listing: bool = False

    def validate(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0,1), got {self.gamma}")
        if not (0.0 < self.threshold_init < 1.0):
            raise ValueError(f"threshold_init must be in (0,1), got {self.threshold_init}")
        return self


class ThresholdParams:
    """Learnable L x H threshold weights, unconstrained, gradient-tracked."""

    def __init__(self, L, H, init=0.5):
        self.theta = Tensor(np.full((L, H), float(init)), requires_grad=True)

    @property
    def shape(self):
        return self.theta.data.shape


def entropies_from_trace(trace, eps=EPS):
    """Per-head batch-averaged entropies as graph scalars: [L][H] list grid."""
    grid = []
    for layer_probs in trace.attention:
        row = []
        for p in layer_probs:
            row.append(ad.mean(ad.entropy_rows(p, eps)))
        grid.append(row)
    return grid


def penalty_from_entropies(entropies, theta, gamma, T):
    """Algorithm core on scalar per-head entropies (graph tensors or floats).

    entropies: [L][H] grid; theta: ThresholdParams (or raw Tensor [L,H]);
    returns the scalar penalty tensor, averaged over heads then layers.
    """
    th = theta.theta if isinstance(theta, ThresholdParams) else theta
    L = len(entropies)
    H = len(entropies[0]) if L else 0
    if th.data.shape != (L, H):
        raise ValueError(
            f"threshold grid shape {th.data.shape} does not match entropy grid ({L},{H})"
        )
    e_max = math.log(T)
    tol = gamma * e_max
    layer_terms = []
    for l in range(L):
        head_terms = []
        for h in range(H):
            e = entropies[l][h]
            if not isinstance(e, Tensor):
                e = Tensor(np.asarray(float(e)))
            delta = ad.sub(e, ad.scale(ad.static_slice(th, (l, h)), e_max))
            if abs(float(delta.data)) > tol:  # gate on detached value
                head_terms.append(ad.square(delta))
        if head_terms:
            acc = head_terms[0]
            for t in head_terms[1:]:
                acc = ad.add(acc, t)
            layer_terms.append(ad.scale(acc, 1.0 / H))
    if not layer_terms:
        return Tensor(np.asarray(0.0))
    acc = layer_terms[0]
    for t in layer_terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / L)


def _penalty_per_position(trace, theta, gamma, T, eps=EPS):
    # compatibility mode: per-position entropies, |deviation| gated, penalties
    # summed over batch and positions, then averaged over heads and layers
    th = theta.theta if isinstance(theta, ThresholdParams) else theta
    L = len(trace.attention)
    H = len(trace.attention[0]) if L else 0
    if th.data.shape != (L, H):
        raise ValueError(
            f"threshold grid shape {th.data.shape} does not match trace ({L},{H})"
        )
    e_max = math.log(T)
    tol = gamma * e_max
    layer_terms = []
    for l in range(L):
        head_terms = []
        for h in range(H):
            rows = ad.entropy_rows(trace.attention[l][h], eps)  # [B,T]
            delta = ad.sub(rows, ad.scale(ad.static_slice(th, (l, h)), e_max))
            gate = (np.abs(delta.data) > tol).astype(np.float64)
            if gate.any():
                head_terms.append(ad.sum_(ad.mul(ad.square(delta), Tensor(gate))))
        if head_terms:
            acc = head_terms[0]
            for t in head_terms[1:]:
                acc = ad.add(acc, t)
            layer_terms.append(ad.scale(acc, 1.0 / H))
    if not layer_terms:
        return Tensor(np.asarray(0.0))
    acc = layer_terms[0]
    for t in layer_terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / L)


def reg_loss(trace, theta, cfg, T):
    """Differentiable regularization loss from a ForwardTrace.

    Gradients flow into the attention parameters and temperatures (through
    the captured probabilities) and into theta. T is the configured context
    length fixing E_max = log T, independent of the batch's sequence length.
    """
    if T < 2:
        raise ValueError(f"regularizer needs T >= 2, got {T}")
    th = theta.theta if isinstance(theta, ThresholdParams) else theta
    L = len(trace.attention)
    H = len(trace.attention[0]) if L else 0
    if th.data.shape != (L, H):
        raise ValueError(
            f"threshold grid shape {th.data.shape} does not match trace ({L},{H})"
        )
    if cfg.per_position_listing:
        return _penalty_per_position(trace, theta, cfg.gamma, T)
    return penalty_from_entropies(entropies_from_trace(trace), theta, cfg.gamma, T)


def total_loss(ce, reg, lam):
    """ce + lam * reg."""
    if lam == 0.0:
        return ce
    return ad.add(ce, ad.scale(reg, lam))
