"""Checkpoint persistence: manifest JSON + one little-endian float64 blob.

A checkpoint is two files sharing a base path: "<base>.json" (manifest) and
"<base>.bin" (raw parameter bytes). The manifest lists every tensor with its
shape and byte offset into the blob, in order; alongside it travel the
architecture echo, the training step, the optimizer step count, the data-RNG
state, and the tokenizer description so generation and analysis can run from
the checkpoint alone. Loading is bitwise: arrays round-trip exactly.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .model import ArchConfig, ModelParams, init_params
from .util import atomic_write_bytes, atomic_write_text

FORMAT_VERSION = 1


def _collect_arrays(params, theta=None, adam=None):
    """Checkpoint order: model tensors, buffers, thresholds, optimizer moments."""
    arrays = {}
    for name, t in params.tensors.items():
        arrays[name] = t.data
    for name, b in params.named_buffers().items():
        arrays[f"buf.{name}"] = b
    if theta is not None:
        arrays["reg.theta"] = theta.theta.data
    if adam is not None:
        arrays.update(adam.state_tensors())
    return arrays


def save_checkpoint(base, params, step, theta=None, adam=None, rng_state=None, tokenizer=None):
    arrays = _collect_arrays(params, theta, adam)
    index = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": params.cfg.to_dict(),
        "step": int(step),
        "adam_t": None if adam is None else int(adam.t),
        "rng_state": rng_state,
        "tokenizer": None if tokenizer is None else tokenizer.to_manifest(),
        "tensors": index,
    }
    atomic_write_bytes(base + ".bin", b"".join(chunks))
    atomic_write_text(base + ".json", json.dumps(manifest, indent=1) + "\n")
    return base


@dataclass
class CheckpointBundle:
    manifest: dict
    arrays: dict

    @property
    def arch(self):
        return ArchConfig(**self.manifest["arch"]).validate()

    @property
    def step(self):
        return int(self.manifest["step"])


def load_checkpoint(base):
    with open(base + ".json") as f:
        manifest = json.load(f)
    ver = manifest.get("format_version")
    if ver != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version mismatch: file has {ver!r}, this build reads {FORMAT_VERSION}"
        )
    with open(base + ".bin", "rb") as f:
        blob = f.read()
    arrays = {}
    prev_end = 0
    for ent in manifest["tensors"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        end = start + 8 * n
        if start != prev_end:
            raise ValueError(
                f"corrupted checkpoint: tensor {ent['name']!r} offset {start} != expected {prev_end}"
            )
        if end > len(blob):
            raise ValueError(
                f"truncated checkpoint blob: need {end} bytes for {ent['name']!r}, have {len(blob)}"
            )
        arrays[ent["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(
            shape
        ).copy()
        prev_end = end
    if prev_end != len(blob):
        raise ValueError(
            f"checkpoint blob has {len(blob) - prev_end} trailing bytes beyond the manifest index"
        )
    return CheckpointBundle(manifest, arrays)


def restore_model(bundle, expect_cfg=None):
    """Rebuild ModelParams (and thresholds if saved) from a bundle.

    expect_cfg, when given, must match the checkpoint's arch echo exactly;
    a mismatch is a hard error naming both configurations.
    """
    cfg = bundle.arch
    if expect_cfg is not None and expect_cfg.to_dict() != cfg.to_dict():
        raise ValueError(
            "checkpoint/config mismatch:\n"
            f"  checkpoint arch: {cfg.to_dict()}\n"
            f"  requested arch:  {expect_cfg.to_dict()}"
        )
    params = init_params(cfg, seed=0)  # placeholder values, fully overwritten
    for name, t in params.tensors.items():
        if name not in bundle.arrays:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if bundle.arrays[name].shape != t.data.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {bundle.arrays[name].shape}, expected {t.data.shape}"
            )
        t.data = bundle.arrays[name].copy()
    from .model import SpectralNormSlot

    for lname, slot in params.slots.items():
        if isinstance(slot, SpectralNormSlot):
            for attr in ("u", "v"):
                key = f"buf.{lname}.{attr}"
                if key not in bundle.arrays:
                    raise ValueError(f"checkpoint missing buffer {key!r}")
                setattr(slot, attr, bundle.arrays[key].copy())
    known = set(params.tensors) | {f"buf.{n}" for n in params.named_buffers()} | {"reg.theta"}
    for name in bundle.arrays:
        if name not in known and not name.startswith(("adam.m.", "adam.v.")):
            raise ValueError(f"checkpoint carries unknown tensor name {name!r}")
    theta = None
    if "reg.theta" in bundle.arrays:
        from .regularizer import ThresholdParams

        theta = ThresholdParams(*bundle.arrays["reg.theta"].shape)
        theta.theta.data = bundle.arrays["reg.theta"].copy()
    return params, theta
