"""Shared fixtures: warmed kernels and on-disk corpora."""

import pytest

from entlab import kernels as K
from entlab.data import synthetic_corpus


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # compile (or load from cache) every jitted kernel once, up front, so
    # timed tests never pay JIT latency
    K.warmup()


@pytest.fixture(scope="session")
def corpus_small(tmp_path_factory):
    """~40 KB synthetic text corpus for fast trainer tests."""
    p = tmp_path_factory.mktemp("corpus") / "small.txt"
    p.write_text(synthetic_corpus(40_000, seed=1), encoding="utf-8")
    return str(p)


@pytest.fixture(scope="session")
def corpus_1mb(tmp_path_factory):
    """~1 MB synthetic text corpus for the smoke-scale acceptance runs."""
    p = tmp_path_factory.mktemp("corpus_big") / "big.txt"
    p.write_text(synthetic_corpus(1_000_000, seed=0), encoding="utf-8")
    return str(p)
