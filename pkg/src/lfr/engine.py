"""End-to-end run loop: scheduler batches -> learner -> ledger records.

Per batch the learner returns each block's mean NLL measured before the
update; the loop records ppl = exp(mean_nll) at the batch's global step.
Focus transitions leave dropped/retained id files in the output
directory (written by the scheduler), and a run.json summary ties the
artifacts to the corpus checksum and configuration.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ledger import PplLedger
from .scheduler import SchedulerConfig, SchedulerState


@dataclass
class RunResult:
    steps: int
    epochs_completed: int
    ledger: PplLedger
    state: SchedulerState
    out_dir: Path | None
    wall_seconds: float


def run_training(
    corpus,
    learner,
    config: SchedulerConfig,
    ledger: PplLedger,
    out_dir: Path | str | None = None,
    snapshot_path: Path | str | None = None,
    log_every: int | None = None,
) -> RunResult:
    """Drive the learner through the whole schedule (or the step budget).

    ``corpus`` needs ``len()``; token payloads are passed to the learner
    only when the corpus carries them (the synthetic learner ignores
    tokens entirely).
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    state = SchedulerState(config, len(corpus), ledger, artifacts_dir=out_dir)
    has_tokens = hasattr(corpus, "tokens")

    t0 = time.monotonic()
    epochs = 0
    while (batch := state.next_batch()) is not None:
        if batch.new_epoch:
            epochs += 1
        ids = np.array(batch.block_ids, dtype=np.int64)
        tokens = corpus.tokens[ids] if has_tokens else None
        mean_nlls = learner.train_on(ids, tokens, batch.step)
        if batch.records_enabled:
            for bid, nll in zip(batch.block_ids, mean_nlls):
                ledger.record(bid, batch.step, math.exp(float(nll)))
        if snapshot_path is not None:
            state.save_snapshot(snapshot_path)
        if log_every and batch.step % log_every == 0:
            print(
                f"step {batch.step}  phase {batch.phase_index}"
                f" ({batch.phase_kind.value})  epoch {batch.epoch_in_phase}"
                f"  mean nll {float(np.mean(mean_nlls)):.4f}"
            )
    ledger.flush()
    wall = time.monotonic() - t0

    if out_dir is not None:
        summary = {
            "corpus_sha256": getattr(corpus, "sha256", ""),
            "n_blocks": len(corpus),
            "schedule": config.schedule.to_dict(),
            "seed": config.seed,
            "batch_size": config.batch_size,
            "step_budget": config.step_budget,
            "steps": state.step,
            "epochs_completed": epochs,
            "wall_seconds": wall,
        }
        (out_dir / "run.json").write_text(json.dumps(summary, indent=2) + "\n")

    return RunResult(state.step, epochs, ledger, state, out_dir, wall)


def eval_corpus_ppls(corpus, learner, batch_size: int = 64) -> np.ndarray:
    """Current perplexity of every block, evaluated without updates."""
    from .learner import eval_mean_nlls

    n = len(corpus)
    has_tokens = hasattr(corpus, "tokens")
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, batch_size):
        ids = np.arange(lo, min(lo + batch_size, n), dtype=np.int64)
        tokens = corpus.tokens[ids] if has_tokens else None
        out[ids] = np.exp(eval_mean_nlls(learner, ids, tokens))
    return out
