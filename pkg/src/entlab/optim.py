"""AdamW with decoupled weight decay, global-norm clipping, LR schedules."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OptimConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0


@dataclass
class ScheduleConfig:
    warmup_steps: int
    total_steps: int
    decay: str = "cosine"

    def validate(self):
        if not (self.total_steps > self.warmup_steps >= 0):
            raise ValueError(
                f"need total_steps > warmup_steps >= 0, got {self.total_steps} / {self.warmup_steps}"
            )
        if self.decay not in ("cosine", "constant"):
            raise ValueError(f"unknown decay {self.decay!r} (want cosine or constant)")
        return self


def lr_at(step, base_lr, sched):
    """LR for 0-indexed step: linear warmup, then cosine decay to 0 or flat."""
    if step < sched.warmup_steps:
        return base_lr * (step + 1) / sched.warmup_steps
    if sched.decay == "constant":
        return base_lr
    span = max(1, sched.total_steps - sched.warmup_steps)
    prog = min(1.0, (step - sched.warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * prog))


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Tensor dict.

    Weight decay applies only to matrices (ndim >= 2): projection blocks,
    embeddings, unembedding, weight-norm directions. Gains, biases, scalars,
    temperatures, and threshold weights are not decayed.
    """

    def __init__(self, named_tensors, cfg):
        self.params = dict(named_tensors)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.decayed = {k: p.data.ndim >= 2 for k, p in self.params.items()}

    def grad_global_norm(self):
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float(np.sum(p.grad * p.grad))
        return math.sqrt(sq)

    def clip_gradients(self):
        """Scale all gradients so the global norm is <= grad_clip_norm.

        Returns the pre-clip norm."""
        norm = self.grad_global_norm()
        clip = self.cfg.grad_clip_norm
        if clip > 0 and norm > clip:
            s = clip / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= s
        return norm

    def step(self, lr):
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps_adam
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + eps)
            if self.decayed[k] and self.cfg.weight_decay > 0:
                upd = upd + self.cfg.weight_decay * p.data
            p.data -= lr * upd

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        """Moment arrays keyed for checkpointing."""
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays, t):
        for k in self.params:
            self.m[k][...] = arrays[f"adam.m.{k}"]
            self.v[k][...] = arrays[f"adam.v.{k}"]
        self.t = int(t)
