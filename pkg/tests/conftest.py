from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from lfr.corpus import Corpus, TokenizerSpec, ingest


def make_corpus(n_blocks: int, context_length: int = 16, vocab_size: int = 256,
                seed: int = 0) -> Corpus:
    """In-memory corpus with random tokens, no disk involved."""
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab_size, (n_blocks, context_length), dtype=np.uint32)
    return Corpus(tokens, vocab_size, context_length)


@pytest.fixture
def byte_corpus(tmp_path: Path) -> Corpus:
    """Small on-disk byte-level corpus (3 documents, L=64)."""
    texts = [
        b"the quick brown fox jumps over the lazy dog. " * 30,
        b"pack my box with five dozen liquor jugs! " * 20,
        b"how vexingly quick daft zebras jump... " * 25,
    ]
    paths = []
    for i, t in enumerate(texts):
        p = tmp_path / f"doc{i}.txt"
        p.write_bytes(t)
        paths.append(p)
    return ingest(paths, TokenizerSpec(), context_length=64, out_dir=tmp_path / "corpus")
