"""Builders shared across test modules."""

import json

import numpy as np

from entlab.checkpoint import save_checkpoint
from entlab.data import TokenizerInfo
from entlab.model import init_params, make_config
from entlab.trainer import train_config_from_dict


def train_doc(corpus_path, **over):
    """A small, fast, valid train-config document; override freely."""
    doc = {
        "arch": {"name": "sm_ln_g", "L": 1, "H": 2, "d": 16, "T": 8, "vocab_size": 256},
        "reg": {"lambda": 0.0},
        "schedule": {"total_steps": 20, "warmup_steps": 2, "decay": "cosine"},
        "batch_size": 2,
        "seed": 0,
        "eval_interval": 10,
        "tokenizer": "byte",
        "corpus_path": str(corpus_path),
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            doc[k].update(v)
        else:
            doc[k] = v
    return doc


def make_train_config(corpus_path, out_dir, **over):
    doc = train_doc(corpus_path, out_dir=str(out_dir), **over)
    return train_config_from_dict(doc)


def write_config(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def zeroed_params(cfg, seed=0):
    """Init params, then zero every weight: logits become exactly uniform."""
    params = init_params(cfg, seed=seed)
    for t in params.tensors.values():
        t.data[...] = 0.0
    return params


def save_model_checkpoint(base, params, step=0, tokenizer_kind="byte", **kw):
    """Checkpoint with a tokenizer manifest so CLI subcommands can load it."""
    tok = TokenizerInfo(kind=tokenizer_kind, vocab_size=params.cfg.vocab_size,
                        chars=kw.pop("chars", None))
    return save_checkpoint(str(base), params, step=step, tokenizer=tok, **kw)


def tiny_params(seed=0, **over):
    over.setdefault("L", 1)
    over.setdefault("H", 2)
    over.setdefault("d", 16)
    over.setdefault("T", 8)
    over.setdefault("vocab_size", 256)
    name = over.pop("name", "sm_ln_g")
    cfg = make_config(name, **over)
    return init_params(cfg, seed=seed)


def rand_probs(rng, B, T, causal=True):
    """Random attention-shaped probabilities: rows sum to 1 on their support."""
    z = rng.normal(size=(B, T, T))
    if causal:
        mask = np.tril(np.ones((T, T), dtype=bool))
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p
