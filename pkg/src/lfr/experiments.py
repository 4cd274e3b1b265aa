"""Desk-scale strategy experiments on the synthetic learner.

Runs the named schedules (lfr / aggr-1 / aggr-2 / random) over the same
difficulty ensemble and reports final noise-free perplexities, overall
and on the hardest-difficulty decile.  Used by the `simulate` CLI and by
the acceptance suite's directional checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import run_training
from .ledger import ForgettingReport, PplLedger
from .scheduler import STRATEGIES, SchedulerConfig, apply_strategy
from .learner.synthetic import SyntheticLearner, SyntheticLearnerConfig


@dataclass(frozen=True)
class SyntheticCorpus:
    """Id-only stand-in for a block store; the synthetic learner needs no tokens."""

    n_blocks: int

    def __len__(self) -> int:
        return self.n_blocks


@dataclass
class StrategyOutcome:
    strategy: str
    seed: int
    steps: int
    full_mean_ppl: float
    hardest_decile_mean_ppl: float
    forgetting: ForgettingReport


def run_synthetic_strategy(
    strategy: str,
    n_blocks: int = 1000,
    epochs: int = 8,
    seed: int = 0,
    learner_config: SyntheticLearnerConfig | None = None,
    batch_size: int = 32,
    out_dir: Path | str | None = None,
) -> StrategyOutcome:
    """One synthetic run; the learner's difficulty ensemble depends only on
    the learner config seed, so strategies compared under the same config
    and seed see identical difficulties."""
    cfg = learner_config or SyntheticLearnerConfig()
    learner = SyntheticLearner(cfg, n_blocks)
    corpus = SyntheticCorpus(n_blocks)
    ledger = PplLedger(n_blocks=n_blocks)
    sched = SchedulerConfig(
        schedule=apply_strategy(strategy, epochs), batch_size=batch_size, seed=seed
    )
    result = run_training(corpus, learner, sched, ledger, out_dir=out_dir)

    ppls = learner.current_ppls()
    decile = max(1, math.ceil(n_blocks / 10))
    hardest = np.argsort(-learner.difficulty)[:decile]
    return StrategyOutcome(
        strategy=strategy,
        seed=seed,
        steps=result.steps,
        full_mean_ppl=float(ppls.mean()),
        hardest_decile_mean_ppl=float(ppls[hardest].mean()),
        forgetting=ledger.forgetting_report(),
    )


def strategy_comparison(
    strategies: tuple[str, ...] = STRATEGIES,
    n_blocks: int = 1000,
    epochs: int = 8,
    seeds: tuple[int, ...] = tuple(range(10)),
    learner_config: SyntheticLearnerConfig | None = None,
    batch_size: int = 32,
) -> list[StrategyOutcome]:
    from dataclasses import replace

    base = learner_config or SyntheticLearnerConfig()
    outcomes = []
    for strategy in strategies:
        for seed in seeds:
            cfg = replace(base, seed=seed)
            outcomes.append(
                run_synthetic_strategy(strategy, n_blocks, epochs, seed, cfg, batch_size)
            )
    return outcomes


def format_comparison_table(outcomes: list[StrategyOutcome]) -> str:
    """Aggregate per strategy: mean over seeds of the final perplexities."""
    by_strategy: dict[str, list[StrategyOutcome]] = {}
    for o in outcomes:
        by_strategy.setdefault(o.strategy, []).append(o)
    lines = [
        f"{'strategy':<10} {'seeds':>5} {'steps':>7} {'mean ppl':>10} {'hardest-decile ppl':>20}"
    ]
    for strategy, rows in by_strategy.items():
        full = np.mean([r.full_mean_ppl for r in rows])
        hard = np.mean([r.hardest_decile_mean_ppl for r in rows])
        steps = int(np.mean([r.steps for r in rows]))
        lines.append(
            f"{strategy:<10} {len(rows):>5} {steps:>7} {full:>10.4f} {hard:>20.4f}"
        )
    return "\n".join(lines)
