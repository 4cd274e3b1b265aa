from .client import (
    BlockBatch,
    ChecksumMismatch,
    ClientError,
    ClientSession,
    ConnectError,
    PhaseInfo,
    ProtocolMismatch,
    ServerError,
    SessionClosed,
    connect,
    corpus_checksum,
)

__all__ = [
    "BlockBatch",
    "ChecksumMismatch",
    "ClientError",
    "ClientSession",
    "ConnectError",
    "PhaseInfo",
    "ProtocolMismatch",
    "ServerError",
    "SessionClosed",
    "connect",
    "corpus_checksum",
]

__version__ = "0.1.0"
