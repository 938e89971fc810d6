"""Desk-scale training loop: ingestion, optimization, metrics, checkpoints.

The loop is sequential and deterministic: a seeded PCG64 stream drives batch
sampling (its state rides along in checkpoints so resume continues the exact
batch sequence), parameters initialize from the config seed, and every
logged quantity except wall_seconds is a pure function of (config, corpus).

Divergence (non-finite loss or parameters) is detected, flagged in the
metric record, and ends the run gracefully with a final checkpoint; it is a
reportable outcome class, not a crash.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .data import check_stream_length, eval_windows, ingest, next_batch, train_val_split
from .entropy import bucket_fractions, model_entropy
from .model import ArchConfig, ConfigError, NAMED_CONFIGS, current_temperatures, init_params, make_config, model_forward
from .optim import AdamW, OptimConfig, ScheduleConfig, lr_at
from .regularizer import RegConfig, ThresholdParams, entropies_from_trace, penalty_from_entropies, reg_loss, total_loss
from .util import atomic_write_text


@dataclass
class TrainConfig:
    arch: ArchConfig
    reg: RegConfig
    optimizer: OptimConfig
    schedule: ScheduleConfig
    batch_size: int
    seed: int
    eval_interval: int
    corpus_path: str
    tokenizer: str
    out_dir: str

    def validate(self):
        self.arch.validate()
        self.reg.validate()
        self.schedule.validate()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.tokenizer not in ("byte", "char"):
            raise ConfigError(f"tokenizer must be byte or char, got {self.tokenizer!r}")
        return self

    def to_dict(self):
        return {
            "arch": self.arch.to_dict(),
            "reg": {
                "lambda": self.reg.lam,
                "gamma": self.reg.gamma,
                "threshold_init": self.reg.threshold_init,
                "per_position_listing": self.reg.per_position_listing,
            },
            "optimizer": vars(self.optimizer).copy(),
            "schedule": vars(self.schedule).copy(),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "eval_interval": self.eval_interval,
            "corpus_path": self.corpus_path,
            "tokenizer": self.tokenizer,
            "out_dir": self.out_dir,
        }


def _check_keys(d, allowed, where):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config fields in {where}: {', '.join(unknown)}")


def _typed(d, key, types, default, where):
    if key not in d:
        if default is _REQUIRED:
            raise ConfigError(f"missing required config field {where}.{key}")
        return default
    v = d[key]
    if types is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if types is int and isinstance(v, bool):
        raise ConfigError(f"config field {where}.{key} must be {types.__name__}, got bool")
    if not isinstance(v, types):
        tname = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"config field {where}.{key} must be {tname}, got {type(v).__name__}")
    return v


_REQUIRED = object()


def arch_from_dict(d, where="arch"):
    d = dict(d)
    base = {}
    if "name" in d:
        name = d.pop("name")
        if name not in NAMED_CONFIGS:
            raise ConfigError(
                f"unknown architecture name {name!r}; valid: {', '.join(NAMED_CONFIGS)}"
            )
        base = dict(NAMED_CONFIGS[name])
    allowed = {
        "L", "H", "d", "T", "vocab_size", "ffn_kind", "use_layernorm",
        "learnable_temperature", "norm_alternative", "norm_target_set", "temperature_init",
    }
    _check_keys(d, allowed, where)
    kw = dict(
        L=_typed(d, "L", int, 4, where),
        H=_typed(d, "H", int, 4, where),
        d=_typed(d, "d", int, 128, where),
        T=_typed(d, "T", int, 64, where),
        vocab_size=_typed(d, "vocab_size", int, 256, where),
        ffn_kind=_typed(d, "ffn_kind", str, base.get("ffn_kind", "gelu"), where),
        use_layernorm=_typed(d, "use_layernorm", bool, base.get("use_layernorm", True), where),
        learnable_temperature=_typed(
            d, "learnable_temperature", bool, base.get("learnable_temperature", False), where
        ),
        norm_alternative=_typed(d, "norm_alternative", str, "none", where),
        norm_target_set=_typed(d, "norm_target_set", str, "FFN", where),
        temperature_init=_typed(d, "temperature_init", float, 1e-2, where),
    )
    return ArchConfig(**kw).validate()


def train_config_from_dict(doc, default_out="runs/default"):
    _check_keys(
        doc,
        {"arch", "reg", "optimizer", "schedule", "batch_size", "seed", "eval_interval",
         "corpus_path", "tokenizer", "out_dir"},
        "config",
    )
    arch = arch_from_dict(doc.get("arch", {}))
    r = doc.get("reg", {})
    _check_keys(r, {"lambda", "gamma", "threshold_init", "per_position_listing"}, "reg")
    reg = RegConfig(
        lam=_typed(r, "lambda", float, 1e-5, "reg"),
        gamma=_typed(r, "gamma", float, 0.2, "reg"),
        threshold_init=_typed(r, "threshold_init", float, 0.5, "reg"),
        per_position_listing=_typed(r, "per_position_listing", bool, False, "reg"),
    ).validate()
    o = doc.get("optimizer", {})
    _check_keys(
        o, {"learning_rate", "beta1", "beta2", "eps_adam", "weight_decay", "grad_clip_norm"},
        "optimizer",
    )
    opt = OptimConfig(
        learning_rate=_typed(o, "learning_rate", float, 3e-4, "optimizer"),
        beta1=_typed(o, "beta1", float, 0.9, "optimizer"),
        beta2=_typed(o, "beta2", float, 0.999, "optimizer"),
        eps_adam=_typed(o, "eps_adam", float, 1e-8, "optimizer"),
        weight_decay=_typed(o, "weight_decay", float, 0.01, "optimizer"),
        grad_clip_norm=_typed(o, "grad_clip_norm", float, 1.0, "optimizer"),
    )
    s = doc.get("schedule", {})
    _check_keys(s, {"warmup_steps", "total_steps", "decay"}, "schedule")
    total = _typed(s, "total_steps", int, 2000, "schedule")
    sched = ScheduleConfig(
        warmup_steps=_typed(s, "warmup_steps", int, max(1, total // 20), "schedule"),
        total_steps=total,
        decay=_typed(s, "decay", str, "cosine", "schedule"),
    ).validate()
    return TrainConfig(
        arch=arch,
        reg=reg,
        optimizer=opt,
        schedule=sched,
        batch_size=_typed(doc, "batch_size", int, 8, "config"),
        seed=_typed(doc, "seed", int, 0, "config"),
        eval_interval=_typed(doc, "eval_interval", int, 250, "config"),
        corpus_path=_typed(doc, "corpus_path", str, _REQUIRED, "config"),
        tokenizer=_typed(doc, "tokenizer", str, "byte", "config"),
        out_dir=_typed(doc, "out_dir", str, default_out, "config"),
    ).validate()


def load_train_config(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(doc).__name__}")
    stem = os.path.splitext(os.path.basename(path))[0]
    return train_config_from_dict(doc, default_out=os.path.join("runs", stem))


def evaluate(params, val_stream, T, max_windows=16, eps=None):
    """Mean token cross-entropy over non-overlapping held-out windows, plus
    perplexity and the entropy matrix of the final window's trace."""
    xs, ys = eval_windows(val_stream, T, max_windows)
    was_training = params.training
    params.training = False
    try:
        with ad.no_grad():
            ces = []
            trace = None
            for i in range(xs.shape[0]):
                trace = model_forward(params, xs[i : i + 1], want_attention=(i == xs.shape[0] - 1))
                ces.append(float(ad.cross_entropy(trace.logits, ys[i : i + 1]).data))
            em = model_entropy(trace) if params.cfg.L > 0 else None
    finally:
        params.training = was_training
    eval_ce = float(np.mean(ces))
    # exp overflows past ~709; report inf instead of crashing a blown-up run
    ppl = math.exp(eval_ce) if eval_ce < 709.0 else math.inf
    return {"eval_ce": eval_ce, "perplexity": ppl, "entropy_matrix": em}


@dataclass
class RunSummary:
    diverged: bool
    final_step: int
    records: list
    out_dir: str
    checkpoint: str


class Trainer:
    def __init__(self, cfg, resume=None):
        cfg.validate()
        self.cfg = cfg
        stream, self.tok = ingest(cfg.corpus_path, cfg.tokenizer)
        if self.tok.vocab_size > cfg.arch.vocab_size:
            raise ConfigError(
                f"corpus vocabulary {self.tok.vocab_size} exceeds arch vocab_size {cfg.arch.vocab_size}"
            )
        check_stream_length(stream, cfg.arch.T)
        self.train_stream, self.val_stream = train_val_split(stream)
        check_stream_length(self.train_stream, cfg.arch.T, what="training split")
        check_stream_length(self.val_stream, cfg.arch.T, what="held-out split")

        if resume is not None:
            bundle = load_checkpoint(resume)
            self.params, theta = restore_model(bundle, expect_cfg=cfg.arch)
            self.theta = theta if theta is not None else ThresholdParams(
                cfg.arch.L, cfg.arch.H, cfg.reg.threshold_init
            )
            self.start_step = bundle.step
            self.data_rng = np.random.default_rng()
            if bundle.manifest.get("rng_state") is None:
                raise ValueError("checkpoint has no rng state; cannot resume the batch stream")
            self.data_rng.bit_generator.state = bundle.manifest["rng_state"]
            self.adam = AdamW(self._opt_params(), cfg.optimizer)
            self.adam.load_state(bundle.arrays, bundle.manifest.get("adam_t", bundle.step))
        else:
            self.params = init_params(cfg.arch, cfg.seed)
            self.theta = ThresholdParams(cfg.arch.L, cfg.arch.H, cfg.reg.threshold_init)
            self.start_step = 0
            self.data_rng = np.random.default_rng([cfg.seed, 1])
            self.adam = AdamW(self._opt_params(), cfg.optimizer)

        self.records = []
        self._metrics_prefix = []
        metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
        if resume is not None and os.path.exists(metrics_path):
            with open(metrics_path) as f:
                self._metrics_prefix = [ln.rstrip("\n") for ln in f if ln.strip()]

    def _opt_params(self):
        named = dict(self.params.tensors)
        named["reg.theta"] = self.theta.theta
        return named

    # ------------------------------------------------------------------ loop

    def _reg_value_detached(self, trace):
        # regularizer readout when lambda = 0: same math, no graph kept
        ent = entropies_from_trace(trace)
        grid = [[Tensor(np.asarray(float(e.data))) for e in row] for row in ent]
        return float(
            penalty_from_entropies(grid, self.theta, self.cfg.reg.gamma, self.cfg.arch.T).data
        )

    def train_step(self, x, y, step):
        """One optimization step; returns (ce, reg, total, finite)."""
        cfg = self.cfg
        lam = cfg.reg.lam
        self.params.training = True
        want_attn = lam > 0
        trace = model_forward(self.params, x, want_attention=want_attn)
        ce = ad.cross_entropy(trace.logits, y)
        if lam > 0:
            reg = reg_loss(trace, self.theta, cfg.reg, cfg.arch.T)
            total = total_loss(ce, reg, lam)
            reg_val = float(reg.data)
        else:
            total = ce
            reg_val = None  # filled lazily at logging steps
        ce_val = float(ce.data)
        total_val = float(total.data)
        if not math.isfinite(total_val):
            return ce_val, reg_val, total_val, False
        ad.backward(total)
        self.adam.clip_gradients()
        self.adam.step(lr_at(step, cfg.optimizer.learning_rate, cfg.schedule))
        self.adam.zero_grad()
        return ce_val, reg_val, total_val, True

    def _record(self, step, ce, reg, total, wall, diverged):
        cfg = self.cfg
        rec = {
            "step": step,
            "ce_loss": ce,
            "reg_loss": reg,
            "total_loss": total,
            "eval_ce": None,
            "perplexity": None,
            "layer_entropy": None,
            "bucket_fractions": None,
            "wall_seconds": wall,
            "diverged": diverged,
        }
        if not diverged:
            ev = evaluate(self.params, self.val_stream, cfg.arch.T)
            rec["eval_ce"] = ev["eval_ce"]
            rec["perplexity"] = ev["perplexity"]
            em = ev["entropy_matrix"]
            if em is not None:
                rec["layer_entropy"] = [float(v) for v in em.values.mean(axis=1)]
                rec["bucket_fractions"] = list(bucket_fractions(em).fractions)
        temps = current_temperatures(self.params)
        if temps is not None:
            rec["temp_min"] = float(temps.min())
            rec["temp_mean"] = float(temps.mean())
            rec["temp_max"] = float(temps.max())
        self.records.append(rec)
        lines = self._metrics_prefix + [json.dumps(r) for r in self.records]
        atomic_write_text(os.path.join(cfg.out_dir, "metrics.jsonl"), "\n".join(lines) + "\n")

    def _save(self, name, step):
        return save_checkpoint(
            os.path.join(self.cfg.out_dir, name),
            self.params,
            step,
            theta=self.theta,
            adam=self.adam,
            rng_state=self.data_rng.bit_generator.state,
            tokenizer=self.tok,
        )

    def run(self):
        cfg = self.cfg
        t0 = time.time()
        os.makedirs(cfg.out_dir, exist_ok=True)
        diverged = False
        step = self.start_step
        if step == 0:
            # step-0 baseline record (pre-update model)
            self._record(0, None, None, None, 0.0, False)
        while step < cfg.schedule.total_steps:
            x, y = next_batch(self.train_stream, cfg.arch.T, cfg.batch_size, self.data_rng)
            ce, reg, total, ok = self.train_step(x, y, step)
            step += 1
            if not ok:
                diverged = True
                self._record(step, ce, reg, total, time.time() - t0, True)
                break
            if step % cfg.eval_interval == 0 or step == cfg.schedule.total_steps:
                if reg is None:
                    self.params.training = False
                    with ad.no_grad():
                        trace = model_forward(self.params, x, want_attention=True)
                    self.params.training = True
                    reg = self._reg_value_detached(trace)
                self._record(step, ce, reg, total, time.time() - t0, False)
                self._save("checkpoint_last", step)
        if not diverged and not self.params.all_finite():
            diverged = True
            self._record(step, None, None, None, time.time() - t0, True)
        ckpt = self._save("checkpoint_final", step)
        return RunSummary(diverged, step, self.records, cfg.out_dir, ckpt)
