"""Perplexity-driven Learn-Focus-Revise data scheduling for LM training."""

from .corpus import Corpus, TokenBlock, TokenizerSpec, ingest, load
from .errors import (
    ConfigError,
    CorruptionError,
    DomainError,
    EngineError,
    FormatError,
    IngestError,
    OrderingError,
    ProtocolError,
    SchedulingError,
    TrainingError,
)
from .ledger import (
    PplLedger,
    PplRecord,
    Trajectory,
    TrajectoryClass,
    TrajectoryKind,
    classify,
    ppl_from_nlls,
)
from .scheduler import (
    Batch,
    PhaseKind,
    PhaseSpec,
    Schedule,
    SchedulerConfig,
    SchedulerState,
    apply_strategy,
    schedule_from_hparams,
    select_focus_set,
)
from .engine import eval_corpus_ppls, run_training

__version__ = "0.1.0"
