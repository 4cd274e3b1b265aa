"""Learn-Focus-Revise phase machine driving epoch-wise batch emission.

A schedule is an ordered list of phases.  Learn and Revise sample the
whole corpus; Focus samples only the highest-perplexity subset selected
at the phase transition from the ledger.  Within a phase, each epoch is
one uniform random permutation of the active pool, emitted in batches
without replacement; every pool block appears exactly once per epoch.

Determinism: the permutation for (phase p, epoch e) is derived from the
run seed and (p, e) alone, so a run is fully reproducible from
(seed, schedule, ledger contents), and a snapshot only needs to store
integer cursors plus the active pool.

Schedules come from Algorithm-style hyperparameter tuples
(p1, s1, p2, p3, reps), from named strategies, or from explicit phase
lists (the four-phase reference schedule changes the pruning fraction
between cycles, so explicit lists are first-class).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import ConfigError, SchedulingError
from .ledger import PplLedger


class PhaseKind(Enum):
    LEARN = "learn"
    FOCUS = "focus"
    REVISE = "revise"


@dataclass(frozen=True)
class PhaseSpec:
    kind: PhaseKind
    epochs: int
    keep_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"phase epochs must be >= 1, got {self.epochs}")
        if self.kind is PhaseKind.FOCUS:
            if not 0 < self.keep_fraction <= 1:
                raise ConfigError(
                    f"focus keep_fraction must be in (0, 1], got {self.keep_fraction}"
                )
        elif self.keep_fraction != 1.0:
            raise ConfigError(f"{self.kind.value} phases keep the full corpus")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "epochs": self.epochs, "keep_fraction": self.keep_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSpec":
        return cls(PhaseKind(d["kind"]), d["epochs"], d.get("keep_fraction", 1.0))


@dataclass(frozen=True)
class Schedule:
    phases: tuple[PhaseSpec, ...]

    def __post_init__(self) -> None:
        if not self.phases:
            raise ConfigError("schedule needs at least one phase")
        if self.phases[0].kind is not PhaseKind.LEARN:
            raise ConfigError("the first phase must be Learn")

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    @property
    def keep_fractions(self) -> tuple[float, ...]:
        return tuple(p.keep_fraction for p in self.phases)

    def to_dict(self) -> dict:
        return {"phases": [p.to_dict() for p in self.phases]}


def schedule_from_hparams(p1: int, s1: float, p2: int, p3: int, reps: int) -> Schedule:
    """Sugar for the hyperparameter tuple: Learn*p1 then reps x (Focus, Revise).

    p3 = 0 drops the Revise phases (the no-reintroduction variant);
    zero-epoch phases are simply omitted.
    """
    if p1 < 1 or p2 < 1:
        raise ConfigError(f"p1 and p2 must be >= 1, got p1={p1}, p2={p2}")
    if p3 < 0:
        raise ConfigError(f"p3 must be >= 0, got {p3}")
    if not 0 < s1 < 100:
        raise ConfigError(f"s1 must be in (0, 100), got {s1}")
    if reps < 0:
        raise ConfigError(f"reps must be >= 0, got {reps}")
    keep = (100.0 - s1) / 100.0
    phases = [PhaseSpec(PhaseKind.LEARN, p1)]
    for _ in range(reps):
        phases.append(PhaseSpec(PhaseKind.FOCUS, p2, keep))
        if p3 > 0:
            phases.append(PhaseSpec(PhaseKind.REVISE, p3))
    return Schedule(tuple(phases))


STRATEGIES = ("lfr", "aggr-1", "aggr-2", "random")


def apply_strategy(name: str, total_epochs: int = 8) -> Schedule:
    """Instantiate a named strategy within a total epoch budget.

    lfr     Learn 1, Focus 50% 1, Revise 1, Focus 30% for the remainder
    aggr-1  Learn 1, then Focus 50% for all remaining epochs (no Revise)
    aggr-2  lfr with the first Focus pruned to 30% as well
    random  uniform sampling over the full corpus (the RS baseline)
    """
    L, F, R = PhaseKind.LEARN, PhaseKind.FOCUS, PhaseKind.REVISE
    if name == "random":
        if total_epochs < 1:
            raise ConfigError("random strategy needs at least 1 epoch")
        return Schedule((PhaseSpec(L, total_epochs),))
    if name == "aggr-1":
        if total_epochs < 2:
            raise ConfigError("aggr-1 needs at least 2 epochs")
        return Schedule((PhaseSpec(L, 1), PhaseSpec(F, total_epochs - 1, 0.5)))
    if name in ("lfr", "aggr-2"):
        if total_epochs < 4:
            raise ConfigError(f"{name} needs at least 4 epochs")
        first_keep = 0.5 if name == "lfr" else 0.3
        return Schedule(
            (
                PhaseSpec(L, 1),
                PhaseSpec(F, 1, first_keep),
                PhaseSpec(R, 1),
                PhaseSpec(F, total_epochs - 3, 0.3),
            )
        )
    raise ConfigError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")


# ---------------------------------------------------------------------------
# Focus-set selection
# ---------------------------------------------------------------------------

def select_focus_set(
    latest_ppls: Mapping[int, float], keep_fraction: float, n_blocks: int | None = None
) -> set[int]:
    """The ceil(keep_fraction * n) blocks with the highest perplexity.

    Ties at the cut are broken by ascending block id.  When ``n_blocks``
    is given the map must cover the whole corpus.
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if n_blocks is not None:
        missing = [b for b in range(n_blocks) if b not in latest_ppls]
        if missing:
            shown = ", ".join(map(str, missing[:10]))
            more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
            raise SchedulingError(f"no perplexity recorded for blocks: {shown}{more}")
    n = len(latest_ppls)
    if n == 0:
        raise SchedulingError("cannot select a focus set from an empty perplexity map")
    m = math.ceil(keep_fraction * n)
    ids = np.fromiter(latest_ppls.keys(), dtype=np.int64, count=n)
    ppls = np.fromiter(latest_ppls.values(), dtype=np.float64, count=n)
    order = np.lexsort((ids, -ppls))  # ppl descending, then id ascending
    return set(int(b) for b in ids[order[:m]])


# ---------------------------------------------------------------------------
# Scheduler state
# ---------------------------------------------------------------------------

RECORD_PHASES = ("all", "learn_revise")
SELECTION_WINDOWS = ("last_recording_phase", "all_history")


@dataclass
class SchedulerConfig:
    schedule: Schedule
    batch_size: int
    seed: int = 0
    step_budget: int | None = None
    record_phases: str = "all"
    selection_window: str = "last_recording_phase"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.step_budget is not None and self.step_budget < 1:
            raise ConfigError(f"step_budget must be >= 1, got {self.step_budget}")
        if self.record_phases not in RECORD_PHASES:
            raise ConfigError(f"record_phases must be one of {RECORD_PHASES}")
        if self.selection_window not in SELECTION_WINDOWS:
            raise ConfigError(f"selection_window must be one of {SELECTION_WINDOWS}")


@dataclass(frozen=True)
class Batch:
    block_ids: tuple[int, ...]
    step: int
    phase_index: int
    phase_kind: PhaseKind
    epoch_in_phase: int
    new_phase: bool
    new_epoch: bool
    records_enabled: bool


class SchedulerState:
    """Single-writer cursor over the schedule; ledger reads at transitions.

    Entering a Focus phase ranks blocks by their most recent recorded
    perplexity (window = the last completed Learn/Revise phase by
    default, or all history) and restricts the pool to the top
    keep_fraction; entering Learn/Revise restores the full corpus.
    When ``artifacts_dir`` is set, each Focus transition writes
    dropped_phase<k>.ids / retained_phase<k>.ids (k = 1-based phase
    position, matching the four-phase schedule's "phase 2"/"phase 4").
    """

    def __init__(
        self,
        config: SchedulerConfig,
        n_blocks: int,
        ledger: PplLedger,
        artifacts_dir: Path | str | None = None,
    ):
        if n_blocks < 1:
            raise ConfigError("scheduler needs a nonempty corpus")
        self.config = config
        self.n_blocks = n_blocks
        self.ledger = ledger
        self.artifacts_dir = Path(artifacts_dir) if artifacts_dir is not None else None

        self.phase_index = 0
        self.epoch_in_phase = 0
        self.cursor = 0
        self.step = 0
        self.exhausted = False
        self._pending_new_phase = True
        self._pending_new_epoch = True
        # step span of each phase touched so far: phase index -> [first, last]
        self.phase_step_ranges: dict[int, list[int]] = {}

        self.active_pool = np.arange(n_blocks, dtype=np.int64)
        self._perm = self._epoch_permutation()

    # -- derived ------------------------------------------------------------

    @property
    def schedule(self) -> Schedule:
        return self.config.schedule

    @property
    def current_phase(self) -> PhaseSpec:
        return self.schedule.phases[self.phase_index]

    def _epoch_permutation(self) -> np.ndarray:
        seq = np.random.SeedSequence(
            entropy=self.config.seed, spawn_key=(self.phase_index, self.epoch_in_phase)
        )
        return np.random.default_rng(seq).permutation(self.active_pool)

    def _records_enabled(self, kind: PhaseKind) -> bool:
        if self.config.record_phases == "all":
            return True
        return kind in (PhaseKind.LEARN, PhaseKind.REVISE)

    # -- transitions ----------------------------------------------------------

    def _selection_window(self, phase_index: int) -> tuple[int, int] | None:
        """Step window whose records rank blocks for a Focus transition."""
        if self.config.selection_window == "all_history":
            return None
        for idx in range(phase_index - 1, -1, -1):
            kind = self.schedule.phases[idx].kind
            if kind in (PhaseKind.LEARN, PhaseKind.REVISE) and idx in self.phase_step_ranges:
                lo, hi = self.phase_step_ranges[idx]
                return lo, hi
        raise SchedulingError(
            f"phase {phase_index} (focus) has no completed recording phase before it"
        )

    def _pool_for_phase(self, phase_index: int) -> np.ndarray:
        """Active pool on entering a phase; raises without mutating state."""
        phase = self.schedule.phases[phase_index]
        if phase.kind is not PhaseKind.FOCUS:
            return np.arange(self.n_blocks, dtype=np.int64)
        window = self._selection_window(phase_index)
        latest, missing = self.ledger.latest_ppls(window)
        if missing:
            shown = ", ".join(map(str, missing[:10]))
            more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
            raise SchedulingError(
                f"focus transition at phase {phase_index}: no recorded"
                f" perplexity in window {window} for blocks {shown}{more}"
            )
        kept = select_focus_set(latest, phase.keep_fraction, self.n_blocks)
        return np.array(sorted(kept), dtype=np.int64)

    def _write_id_files(self, phase_index: int, kept: np.ndarray) -> None:
        self.artifacts_dir.mkdir(parents=True, exist_ok=True)
        tag = phase_index + 1
        kept_set = set(int(b) for b in kept)
        dropped = sorted(set(range(self.n_blocks)) - kept_set)
        retained = sorted(kept_set)
        for name, ids in ((f"dropped_phase{tag}.ids", dropped), (f"retained_phase{tag}.ids", retained)):
            with open(self.artifacts_dir / name, "w") as f:
                f.writelines(f"{b}\n" for b in ids)

    def _advance_epoch(self) -> bool:
        """Move past a finished epoch; returns False when the schedule ends.

        Pool selection for a new phase runs before any state changes, so
        a failed Focus transition (missing perplexities) leaves the state
        intact and can be retried after the records arrive.
        """
        epoch = self.epoch_in_phase + 1
        phase_index = self.phase_index
        pool = self.active_pool
        new_phase = False
        if epoch >= self.schedule.phases[phase_index].epochs:
            phase_index += 1
            epoch = 0
            if phase_index >= len(self.schedule.phases):
                return False
            pool = self._pool_for_phase(phase_index)  # may raise; nothing mutated yet
            new_phase = True

        self.phase_index = phase_index
        self.epoch_in_phase = epoch
        self.cursor = 0
        self.active_pool = pool
        if new_phase:
            self._pending_new_phase = True
            if (
                self.artifacts_dir is not None
                and self.schedule.phases[phase_index].kind is PhaseKind.FOCUS
            ):
                self._write_id_files(phase_index, pool)
        self._pending_new_epoch = True
        self._perm = self._epoch_permutation()
        return True

    # -- emission -------------------------------------------------------------

    def next_batch(self) -> Batch | None:
        """Emit the next batch, or None once the schedule (or budget) ends."""
        if self.exhausted:
            return None
        if self.config.step_budget is not None and self.step >= self.config.step_budget:
            self.exhausted = True
            return None
        if self.cursor >= len(self._perm):
            if not self._advance_epoch():
                self.exhausted = True
                return None
        ids = self._perm[self.cursor : self.cursor + self.config.batch_size]
        self.cursor += len(ids)
        step = self.step
        self.step += 1
        span = self.phase_step_ranges.setdefault(self.phase_index, [step, step])
        span[1] = step

        batch = Batch(
            block_ids=tuple(int(b) for b in ids),
            step=step,
            phase_index=self.phase_index,
            phase_kind=self.current_phase.kind,
            epoch_in_phase=self.epoch_in_phase,
            new_phase=self._pending_new_phase,
            new_epoch=self._pending_new_epoch,
            records_enabled=self._records_enabled(self.current_phase.kind),
        )
        self._pending_new_phase = False
        self._pending_new_epoch = False
        return batch

    def __iter__(self) -> Iterator[Batch]:
        while (batch := self.next_batch()) is not None:
            yield batch

    # -- persistence ----------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "seed": self.config.seed,
            "batch_size": self.config.batch_size,
            "step_budget": self.config.step_budget,
            "record_phases": self.config.record_phases,
            "selection_window": self.config.selection_window,
            "schedule": self.schedule.to_dict(),
            "n_blocks": self.n_blocks,
            "phase_index": self.phase_index,
            "epoch_in_phase": self.epoch_in_phase,
            "cursor": self.cursor,
            "step": self.step,
            "exhausted": self.exhausted,
            "pending_new_phase": self._pending_new_phase,
            "pending_new_epoch": self._pending_new_epoch,
            "phase_step_ranges": {str(k): v for k, v in self.phase_step_ranges.items()},
            "active_pool": [int(b) for b in self.active_pool],
        }

    def save_snapshot(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.snapshot()) + "\n")

    @classmethod
    def restore(
        cls,
        snap: dict,
        ledger: PplLedger,
        artifacts_dir: Path | str | None = None,
    ) -> "SchedulerState":
        config = SchedulerConfig(
            schedule=Schedule(tuple(PhaseSpec.from_dict(p) for p in snap["schedule"]["phases"])),
            batch_size=snap["batch_size"],
            seed=snap["seed"],
            step_budget=snap["step_budget"],
            record_phases=snap["record_phases"],
            selection_window=snap["selection_window"],
        )
        state = cls(config, snap["n_blocks"], ledger, artifacts_dir)
        state.phase_index = snap["phase_index"]
        state.epoch_in_phase = snap["epoch_in_phase"]
        state.cursor = snap["cursor"]
        state.step = snap["step"]
        state.exhausted = snap["exhausted"]
        state._pending_new_phase = snap["pending_new_phase"]
        state._pending_new_epoch = snap["pending_new_epoch"]
        state.phase_step_ranges = {int(k): list(v) for k, v in snap["phase_step_ranges"].items()}
        state.active_pool = np.array(snap["active_pool"], dtype=np.int64)
        if not state.exhausted and state.phase_index < len(state.schedule.phases):
            state._perm = state._epoch_permutation()
        return state

    @classmethod
    def load_snapshot(
        cls, path: Path | str, ledger: PplLedger, artifacts_dir: Path | str | None = None
    ) -> "SchedulerState":
        return cls.restore(json.loads(Path(path).read_text()), ledger, artifacts_dir)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def load_schedule_config(path: Path | str) -> SchedulerConfig:
    """Parse a schedule config file (hparams tuple, explicit phases, or strategy)."""
    raw = json.loads(Path(path).read_text())
    keys = [k for k in ("hparams", "phases", "strategy") if k in raw]
    if len(keys) != 1:
        raise ConfigError(
            f"{path}: exactly one of 'hparams', 'phases', 'strategy' required, found {keys}"
        )
    if keys[0] == "hparams":
        h = raw["hparams"]
        schedule = schedule_from_hparams(h["p1"], h["s1"], h["p2"], h["p3"], h["reps"])
    elif keys[0] == "phases":
        schedule = Schedule(tuple(PhaseSpec.from_dict(p) for p in raw["phases"]))
    else:
        schedule = apply_strategy(raw["strategy"], raw.get("total_epochs", 8))
    return SchedulerConfig(
        schedule=schedule,
        batch_size=raw.get("batch_size", 32),
        seed=raw.get("seed", 0),
        step_budget=raw.get("step_budget"),
        record_phases=raw.get("record_phases", "all"),
        selection_window=raw.get("selection_window", "last_recording_phase"),
    )
