"""Tokenizers, batching, splits, and the synthetic corpus generator."""

import json
import subprocess
import sys

import numpy as np
import pytest

from entlab.data import (
    TokenizerInfo,
    check_stream_length,
    detokenize,
    eval_windows,
    ingest,
    next_batch,
    synthetic_corpus,
    train_val_split,
)


def write_corpus(tmp_path, text, name="c.txt"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


# ---------------------------------------------------------------- tokenizers


def test_byte_round_trip_random_ascii():
    rng = np.random.default_rng(0)
    info = TokenizerInfo("byte", 256)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        s = "".join(chr(int(c)) for c in rng.integers(32, 127, size=n))
        ids = info.encode(s)
        assert ids.dtype == np.int64
        assert detokenize(ids, info) == s


def test_byte_round_trip_multibyte_utf8():
    info = TokenizerInfo("byte", 256)
    s = "café — naïve Δx"
    ids = info.encode(s)
    assert len(ids) == len(s.encode("utf-8"))
    assert info.decode(ids) == s


def test_byte_stream_length_equals_file_bytes(tmp_path):
    text = "hello éé\n" * 10
    path = write_corpus(tmp_path, text)
    stream, info = ingest(path, "byte")
    assert info.kind == "byte" and info.vocab_size == 256
    assert len(stream) == len(text.encode("utf-8"))


def test_char_vocab_sorted_and_stream(tmp_path):
    path = write_corpus(tmp_path, "abab")
    stream, info = ingest(path, "char")
    assert info.kind == "char"
    assert info.vocab_size == 2
    assert info.chars == ["a", "b"]
    assert stream.tolist() == [0, 1, 0, 1]


def test_char_vocab_sidecar_json(tmp_path):
    path = write_corpus(tmp_path, "bca")
    ingest(path, "char")
    side = json.loads(open(path + ".vocab.json").read())
    assert side == {"a": 0, "b": 1, "c": 2}


def test_char_round_trip(tmp_path):
    text = "the quick brown fox. THE QUICK\n"
    path = write_corpus(tmp_path, text)
    stream, info = ingest(path, "char")
    assert detokenize(stream, info) == text


def test_char_unknown_character_raises(tmp_path):
    path = write_corpus(tmp_path, "ab")
    _, info = ingest(path, "char")
    with pytest.raises(ValueError, match="not in corpus vocabulary"):
        info.encode("abc")


def test_empty_corpus_raises(tmp_path):
    path = write_corpus(tmp_path, "")
    with pytest.raises(ValueError, match="is empty"):
        ingest(path, "byte")


def test_unknown_tokenizer_raises(tmp_path):
    path = write_corpus(tmp_path, "abc")
    with pytest.raises(ValueError, match="byte or char"):
        ingest(path, "bpe")


def test_tokenizer_manifest_round_trip():
    a = TokenizerInfo("char", 3, ["x", "y", "z"])
    b = TokenizerInfo.from_manifest(a.to_manifest())
    assert b.kind == "char" and b.vocab_size == 3 and b.chars == ["x", "y", "z"]
    assert b.encode("zyx").tolist() == [2, 1, 0]
    byte = TokenizerInfo.from_manifest(TokenizerInfo("byte", 256).to_manifest())
    assert byte.kind == "byte" and byte.chars is None


# ------------------------------------------------------------------ batching


def test_check_stream_length():
    check_stream_length(np.arange(9), 8)
    with pytest.raises(ValueError, match="too short"):
        check_stream_length(np.arange(8), 8)


def test_train_val_split_last_tenth():
    stream = np.arange(100)
    tr, va = train_val_split(stream)
    assert len(tr) == 90 and len(va) == 10
    assert va.tolist() == list(range(90, 100))
    tr2, va2 = train_val_split(np.arange(7), val_fraction=0.1)
    assert len(va2) == 1 and len(tr2) == 6  # floor never drops to zero


def test_next_batch_shapes_and_shift():
    stream = np.arange(50)
    x, y = next_batch(stream, T=8, batch_size=4, rng=np.random.default_rng(0))
    assert x.shape == (4, 8) and y.shape == (4, 8)
    assert np.array_equal(y, x + 1)  # arange stream: target is input + 1


def test_next_batch_deterministic_under_seed():
    stream = np.arange(200)
    a = next_batch(stream, 8, 4, np.random.default_rng(42))
    b = next_batch(stream, 8, 4, np.random.default_rng(42))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_next_batch_windows_stay_in_bounds():
    stream = np.arange(20)
    for seed in range(30):
        x, y = next_batch(stream, T=8, batch_size=16, rng=np.random.default_rng(seed))
        assert x.min() >= 0 and y.max() <= 19


def test_next_batch_start_positions_roughly_uniform():
    # chi-square over window starts; generous cut, fixed seed keeps it stable
    stream = np.arange(40)
    T = 8
    n_starts = len(stream) - T  # 32 possible starts
    rng = np.random.default_rng(7)
    counts = np.zeros(n_starts)
    draws = 100_000
    x, _ = next_batch(stream, T, draws, rng)
    starts = x[:, 0]
    for s in starts:
        counts[s] += 1
    expect = draws / n_starts
    chi2 = float(np.sum((counts - expect) ** 2 / expect))
    # dof 31, mean 31, sd ~7.9; 80 is > 6 sigma
    assert chi2 < 80.0
    assert np.all(counts > 0)


def test_eval_windows_non_overlapping_from_start():
    stream = np.arange(100)
    xs, ys = eval_windows(stream, T=8, max_windows=5)
    assert xs.shape == (5, 8)
    assert xs[0].tolist() == list(range(8))
    assert xs[1].tolist() == list(range(8, 16))
    assert np.array_equal(ys, xs + 1)


def test_eval_windows_capped_by_stream():
    stream = np.arange(20)
    xs, _ = eval_windows(stream, T=8, max_windows=100)
    assert xs.shape[0] == 2  # (20 - 1) // 8


def test_eval_windows_too_short():
    with pytest.raises(ValueError, match="held-out stream too short"):
        eval_windows(np.arange(5), T=8)


# ---------------------------------------------------------- synthetic corpus


def test_synthetic_corpus_deterministic():
    a = synthetic_corpus(5000, seed=3)
    b = synthetic_corpus(5000, seed=3)
    assert a == b
    assert len(a) == 5000


def test_synthetic_corpus_seed_sensitivity():
    assert synthetic_corpus(2000, seed=0) != synthetic_corpus(2000, seed=1)


def test_synthetic_corpus_is_ascii_text():
    text = synthetic_corpus(3000, seed=0)
    assert text == text.encode("ascii", errors="ignore").decode()
    assert "." in text and " " in text


def test_generator_cli(tmp_path):
    out = tmp_path / "gen.txt"
    r = subprocess.run(
        [sys.executable, "-m", "entlab.data", "--out", str(out), "--chars", "1234", "--seed", "5"],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0
    assert "wrote 1234 chars" in r.stdout
    assert out.read_text() == synthetic_corpus(1234, seed=5)
