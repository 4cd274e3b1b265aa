"""Shared exception types for the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class IngestError(EngineError):
    """Raised when raw sources cannot be turned into a block store."""


class FormatError(EngineError):
    """Persisted artifact has an incompatible or inconsistent format."""


class CorruptionError(EngineError):
    """Persisted artifact fails its integrity check (checksum, truncation)."""


class ConfigError(EngineError):
    """Invalid configuration value or unknown option."""


class OrderingError(EngineError):
    """A record violates the per-block step ordering of the ledger."""


class DomainError(EngineError):
    """A block id is outside the corpus range."""


class SchedulingError(EngineError):
    """The phase machine cannot advance (missing perplexities, exhausted)."""


class TrainingError(EngineError):
    """A learner diverged or produced non-finite values."""


class ProtocolError(EngineError):
    """A bridge message is malformed or violates the session state machine."""
