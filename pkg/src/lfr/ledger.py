"""Per-block perplexity telemetry: recording, classification, reporting.

Each time a block is sampled during training its perplexity (exp of the
mean per-token NLL) is appended to that block's trajectory.  Trajectories
are classified from the sign pattern of successive deltas:

  Learned     every non-flat delta is a decrease
  Unlearned   every non-flat delta is an increase, or the trajectory rose
              at some point and never came back down
  Forgotten   at least one rise followed later by a fall; the descent
              count is the number of maximal up-runs each closed by a down
  Insufficient  fewer than 2 records, or all deltas flat

A delta d is "up" when d > epsilon, "down" when d < -epsilon, flat
otherwise; flats are neutral and ignored.

Persistence is an append-only stream of fixed-size little-endian records
(block_id u64, step u64, ppl f64, worker u16), 26 bytes each, no header.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, EngineError, OrderingError

_RECORD = struct.Struct("<QQdH")
RECORD_SIZE = _RECORD.size  # 26 bytes


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------

def ppl_from_nlls(per_token_nlls: Sequence[float] | np.ndarray) -> float:
    """Perplexity of one block: exp of the mean per-token NLL (nats)."""
    arr = np.asarray(per_token_nlls, dtype=np.float64)
    if arr.size == 0:
        raise EngineError("cannot compute perplexity of an empty NLL sequence")
    if not np.all(np.isfinite(arr)):
        raise EngineError("NLL sequence contains NaN or infinite values")
    return float(math.exp(float(arr.mean())))


# ---------------------------------------------------------------------------
# Records and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PplRecord:
    block_id: int
    step: int
    ppl: float
    worker: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.ppl) and self.ppl > 0):
            raise EngineError(f"perplexity must be finite and > 0, got {self.ppl}")
        if self.step < 0:
            raise EngineError(f"step must be non-negative, got {self.step}")


@dataclass
class Trajectory:
    block_id: int
    records: list[PplRecord] = field(default_factory=list)

    def append(self, rec: PplRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise OrderingError(
                f"block {self.block_id}: step {rec.step} not after last"
                f" recorded step {self.records[-1].step}"
            )
        self.records.append(rec)

    @property
    def ppls(self) -> list[float]:
        return [r.ppl for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


class TrajectoryKind(Enum):
    LEARNED = "learned"
    UNLEARNED = "unlearned"
    FORGOTTEN = "forgotten"
    INSUFFICIENT = "insufficient"


@dataclass(frozen=True)
class TrajectoryClass:
    kind: TrajectoryKind
    descent_count: int = 0

    def __post_init__(self) -> None:
        if self.kind is TrajectoryKind.FORGOTTEN and self.descent_count < 1:
            raise EngineError("a Forgotten trajectory needs at least one descent")
        if self.kind is not TrajectoryKind.FORGOTTEN and self.descent_count != 0:
            raise EngineError("descent_count only applies to Forgotten")


LEARNED = TrajectoryClass(TrajectoryKind.LEARNED)
UNLEARNED = TrajectoryClass(TrajectoryKind.UNLEARNED)
INSUFFICIENT = TrajectoryClass(TrajectoryKind.INSUFFICIENT)


def forgotten(descent_count: int) -> TrajectoryClass:
    return TrajectoryClass(TrajectoryKind.FORGOTTEN, descent_count)


def classify(
    trajectory: Trajectory | Sequence[float], epsilon: float = 0.0
) -> TrajectoryClass:
    """Classify one perplexity trajectory; total over all inputs.

    Single pass over deltas: track whether an up-run is open, and close it
    (one forgetting event) at the first subsequent down.  A trajectory
    that falls and then rises without ever recovering has no completed
    rise-fall and is classed Unlearned.
    """
    values = trajectory.ppls if isinstance(trajectory, Trajectory) else list(trajectory)
    if epsilon < 0:
        raise EngineError(f"epsilon must be non-negative, got {epsilon}")

    any_up = any_down = False
    up_open = False
    descents = 0
    for prev, cur in zip(values, values[1:]):
        d = cur - prev
        if d > epsilon:
            any_up = True
            up_open = True
        elif d < -epsilon:
            any_down = True
            if up_open:
                descents += 1
                up_open = False
        # else flat: ignored

    if not any_up and not any_down:
        return INSUFFICIENT
    if descents >= 1:
        return forgotten(descents)
    if any_up:
        # monotone rise, or fell first and never recovered after rising
        return UNLEARNED
    return LEARNED


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

@dataclass
class ForgettingReport:
    n_trajectories: int
    class_counts: dict[str, int]
    fraction_forgotten_at_least_once: float
    fraction_forgotten_multiple_given_forgotten: float
    descent_count_histogram: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "n_trajectories": self.n_trajectories,
            "class_counts": self.class_counts,
            "fraction_forgotten_at_least_once": self.fraction_forgotten_at_least_once,
            "fraction_forgotten_multiple_given_forgotten": (
                self.fraction_forgotten_multiple_given_forgotten
            ),
            "descent_count_histogram": self.descent_count_histogram,
        }


class PplLedger:
    """Time-ordered perplexity records per block, persisted append-only.

    ``record`` is safe to call from multiple threads; per-block step
    monotonicity is enforced and appends are serialized, ordered by
    (step, worker, arrival).  When ``n_blocks`` is given, block ids are
    validated against the corpus range.
    """

    def __init__(self, path: Path | str | None = None, n_blocks: int | None = None):
        self.path = Path(path) if path is not None else None
        self.n_blocks = n_blocks
        self._trajectories: dict[int, Trajectory] = {}
        self._lock = threading.Lock()
        self._fh = open(self.path, "ab") if self.path is not None else None

    # -- writing ------------------------------------------------------------

    def record(self, block_id: int, step: int, ppl: float, worker: int = 0) -> None:
        if self.n_blocks is not None and not 0 <= block_id < self.n_blocks:
            raise DomainError(
                f"block id {block_id} outside corpus range [0, {self.n_blocks})"
            )
        rec = PplRecord(block_id, step, ppl, worker)
        with self._lock:
            traj = self._trajectories.setdefault(block_id, Trajectory(block_id))
            traj.append(rec)  # raises OrderingError before anything is persisted
            if self._fh is not None:
                self._fh.write(_RECORD.pack(block_id, step, ppl, worker))

    def flush(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> "PplLedger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- reading ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._trajectories)

    def trajectory(self, block_id: int) -> Trajectory:
        return self._trajectories[block_id]

    def last_step(self, block_id: int) -> int | None:
        with self._lock:
            traj = self._trajectories.get(block_id)
            return traj.records[-1].step if traj and traj.records else None

    def trajectories(self) -> dict[int, Trajectory]:
        with self._lock:
            return dict(self._trajectories)

    def classify_all(self, epsilon: float = 0.0) -> dict[int, TrajectoryClass]:
        return {bid: classify(t, epsilon) for bid, t in self.trajectories().items()}

    def forgetting_report(self, epsilon: float = 0.0) -> ForgettingReport:
        classes = self.classify_all(epsilon)
        if not classes:
            raise EngineError("forgetting report requires a nonempty ledger")
        counts = {k.value: 0 for k in TrajectoryKind}
        histogram: dict[int, int] = {}
        for c in classes.values():
            counts[c.kind.value] += 1
            if c.kind is TrajectoryKind.FORGOTTEN:
                histogram[c.descent_count] = histogram.get(c.descent_count, 0) + 1
        n = len(classes)
        n_forgotten = counts[TrajectoryKind.FORGOTTEN.value]
        n_multiple = sum(v for k, v in histogram.items() if k >= 2)
        return ForgettingReport(
            n_trajectories=n,
            class_counts=counts,
            fraction_forgotten_at_least_once=n_forgotten / n,
            fraction_forgotten_multiple_given_forgotten=(
                n_multiple / n_forgotten if n_forgotten else 0.0
            ),
            descent_count_histogram=dict(sorted(histogram.items())),
        )

    def latest_ppls(
        self, window: tuple[int, int] | None = None
    ) -> tuple[dict[int, float], list[int]]:
        """Most recent ppl per block within the step window (inclusive).

        Returns (block_id -> ppl, missing block ids).  Missing ids are the
        corpus blocks with no record inside the window; corpus range must
        be known (``n_blocks``) for blocks never recorded to be reported.
        """
        lo, hi = window if window is not None else (0, None)
        latest: dict[int, float] = {}
        for bid, traj in self.trajectories().items():
            for rec in reversed(traj.records):
                if hi is not None and rec.step > hi:
                    continue
                if rec.step < lo:
                    break
                latest[bid] = rec.ppl
                break
        universe = range(self.n_blocks) if self.n_blocks is not None else self._trajectories
        missing = sorted(b for b in universe if b not in latest)
        return latest, missing

    # -- persistence --------------------------------------------------------

    @classmethod
    def load(cls, path: Path | str, n_blocks: int | None = None) -> "PplLedger":
        """Rebuild a ledger from its persisted record stream (read-only)."""
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise EngineError(f"cannot read ledger {path}: {e}") from e
        if len(raw) % RECORD_SIZE != 0:
            raise OrderingError(
                f"{path}: size {len(raw)} is not a multiple of the {RECORD_SIZE}-byte record"
            )
        ledger = cls(path=None, n_blocks=n_blocks)
        by_block: dict[int, list[PplRecord]] = {}
        for off in range(0, len(raw), RECORD_SIZE):
            bid, step, ppl, worker = _RECORD.unpack_from(raw, off)
            by_block.setdefault(bid, []).append(PplRecord(bid, step, ppl, worker))
        for bid, recs in by_block.items():
            traj = Trajectory(bid)
            for rec in sorted(recs, key=lambda r: (r.step, r.worker)):
                traj.append(rec)
            ledger._trajectories[bid] = traj
        return ledger

    def export_csv(self, path: Path | str) -> None:
        with open(path, "w") as f:
            f.write("block_id,step,ppl\n")
            for bid in sorted(self._trajectories):
                for rec in self._trajectories[bid].records:
                    f.write(f"{bid},{rec.step},{rec.ppl!r}\n")
