"""Corpus ingestion, byte/char tokenizers, batching, synthetic corpus.

Byte tokenizer: identity over raw bytes (vocab 256). Char tokenizer: sorted
distinct unicode code points of the corpus; its index is written alongside
the corpus as "<corpus>.vocab.json" so downstream tools share the mapping.

Run `python -m entlab.data --out corpus.txt --chars 1000000 --seed 0` to
generate the deterministic synthetic corpus the smoke configs train on.
"""

import json
import os

import numpy as np

from .util import atomic_write_text


class TokenizerInfo:
    def __init__(self, kind, vocab_size, chars=None):
        self.kind = kind
        self.vocab_size = vocab_size
        self.chars = chars  # index -> char, char tokenizer only
        self._index = {c: i for i, c in enumerate(chars)} if chars else None

    def encode(self, text):
        if self.kind == "byte":
            raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
            return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        try:
            return np.array([self._index[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in corpus vocabulary") from None

    def decode(self, ids):
        ids = np.asarray(ids).tolist()
        if self.kind == "byte":
            return bytes(ids).decode("utf-8", errors="replace")
        return "".join(self.chars[i] for i in ids)

    def to_manifest(self):
        m = {"kind": self.kind, "vocab_size": self.vocab_size}
        if self.chars is not None:
            m["chars"] = "".join(self.chars)
        return m

    @classmethod
    def from_manifest(cls, m):
        chars = list(m["chars"]) if "chars" in m else None
        return cls(m["kind"], m["vocab_size"], chars)


def ingest(corpus_path, tokenizer):
    """Read a corpus file into an int64 token stream.

    Returns (stream, TokenizerInfo). The char tokenizer writes its stable
    vocabulary index to "<corpus_path>.vocab.json".
    """
    if tokenizer not in ("byte", "char"):
        raise ValueError(f"unknown tokenizer {tokenizer!r} (want byte or char)")
    with open(corpus_path, "rb") as f:
        raw = f.read()
    if not raw:
        raise ValueError(f"corpus {corpus_path} is empty")
    if tokenizer == "byte":
        stream = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        return stream, TokenizerInfo("byte", 256)
    text = raw.decode("utf-8")
    chars = sorted(set(text))
    info = TokenizerInfo("char", len(chars), chars)
    atomic_write_text(
        corpus_path + ".vocab.json",
        json.dumps({c: i for i, c in enumerate(chars)}, ensure_ascii=False, indent=0) + "\n",
    )
    return info.encode(text), info


def detokenize(ids, info):
    return info.decode(ids)


def check_stream_length(stream, T, what="corpus"):
    if len(stream) < T + 1:
        raise ValueError(
            f"{what} too short: {len(stream)} tokens < context {T} + 1 (need a next-token target)"
        )


def train_val_split(stream, val_fraction=0.1):
    """Head of the stream trains; the tail is held out for evaluation."""
    n_val = max(1, int(len(stream) * val_fraction))
    return stream[:-n_val], stream[-n_val:]


def next_batch(stream, T, batch_size, rng):
    """Random contiguous windows; targets are inputs shifted by one token."""
    check_stream_length(stream, T)
    starts = rng.integers(0, len(stream) - T, size=batch_size)
    x = np.stack([stream[s : s + T] for s in starts])
    y = np.stack([stream[s + 1 : s + T + 1] for s in starts])
    return x, y


def eval_windows(stream, T, max_windows=16):
    """Deterministic non-overlapping windows from the start of the stream."""
    check_stream_length(stream, T, what="held-out stream")
    n = min((len(stream) - 1) // T, max_windows)
    xs = np.stack([stream[i * T : i * T + T] for i in range(n)])
    ys = np.stack([stream[i * T + 1 : i * T + T + 1] for i in range(n)])
    return xs, ys


# ------------------------------------------------------- synthetic corpus

_NOUNS = (
    "lattice kernel tensor cipher ledger beacon vector orchard anvil circuit "
    "meadow glacier archive furnace compass harbor spiral quarry lantern reef"
).split()
_VERBS = (
    "folds binds scatters anneals indexes tempers routes shards braids seals "
    "kindles carves threads gathers distills"
).split()
_ADJS = (
    "quiet brittle convex woven amber sparse latent mirrored oblique granular "
    "hollow sintered"
).split()
_CONN = "and while because although then so until before after".split()


def synthetic_corpus(n_chars, seed=0):
    """Deterministic pseudo-text with word structure and punctuation.

    Zipf-weighted word draws over a fixed vocabulary give byte-level models
    enough predictable structure for the cross-entropy to fall quickly.
    """
    rng = np.random.default_rng(seed)

    def draw(words):
        ranks = np.arange(1, len(words) + 1, dtype=np.float64)
        p = 1.0 / ranks
        p /= p.sum()
        return words[rng.choice(len(words), p=p)]

    out = []
    total = 0
    sentence_in_par = 0
    while total < n_chars:
        words = []
        for _ in range(int(rng.integers(4, 10))):
            r = rng.random()
            if r < 0.45:
                words.append(draw(_NOUNS))
            elif r < 0.75:
                words.append(draw(_VERBS))
            elif r < 0.92:
                words.append(draw(_ADJS))
            else:
                words.append(draw(_CONN))
        s = " ".join(words)
        s = s[0].upper() + s[1:] + ("." if rng.random() < 0.85 else "?")
        sentence_in_par += 1
        if sentence_in_par >= rng.integers(3, 7):
            s += "\n\n"
            sentence_in_par = 0
        else:
            s += " "
        out.append(s)
        total += len(s)
    return "".join(out)[:n_chars]


def main(argv=None):
    import argparse

    ap = argparse.ArgumentParser(
        prog="python -m entlab.data", description="write a deterministic synthetic corpus"
    )
    ap.add_argument("--out", required=True)
    ap.add_argument("--chars", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    text = synthetic_corpus(args.chars, args.seed)
    atomic_write_text(args.out, text)
    print(f"wrote {len(text)} chars to {args.out} (seed {args.seed})")


if __name__ == "__main__":
    main()
