"""Learners the scheduler can drive.

A learner consumes batches of blocks and returns per-block mean NLLs
(nats/token) measured *before* its parameter update, so ledger records
reflect the model state at sampling time.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from ..corpus import TokenBlock


@runtime_checkable
class Learner(Protocol):
    def train_on(self, block_ids: np.ndarray, tokens: np.ndarray, step: int) -> np.ndarray:
        """One training step on a batch; returns pre-update mean NLL per block."""
        ...

    def eval_nll(self, block: TokenBlock) -> np.ndarray:
        """Per-token NLL sequence for one block under the current parameters."""
        ...


def eval_mean_nlls(learner, block_ids: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Mean NLL per block without updating; batched when the learner supports it."""
    if hasattr(learner, "eval_mean_nlls"):
        return learner.eval_mean_nlls(block_ids, tokens)
    out = np.empty(len(block_ids), dtype=np.float64)
    for i, (bid, toks) in enumerate(zip(block_ids, tokens)):
        out[i] = float(learner.eval_nll(TokenBlock(int(bid), toks)).mean())
    return out


from .synthetic import (  # noqa: E402
    FORGETTING_PROFILE_CONFIG,
    SyntheticLearner,
    SyntheticLearnerConfig,
)
from .tinylm import TinyLM, TinyLMConfig  # noqa: E402

__all__ = [
    "Learner",
    "eval_mean_nlls",
    "SyntheticLearner",
    "SyntheticLearnerConfig",
    "FORGETTING_PROFILE_CONFIG",
    "TinyLM",
    "TinyLMConfig",
]
