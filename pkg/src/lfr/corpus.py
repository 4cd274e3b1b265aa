"""Block store: tokenize raw sources and cut them into fixed-length blocks.

Raw files are tokenized (byte-level by default), concatenated in file
order, and chunked into blocks of exactly ``context_length`` tokens.  The
trailing remainder that does not fill a block is dropped and its size is
recorded in the manifest.  Block ids are dense 0..n-1 positions in the
concatenated stream.

On disk a corpus is two files:

  blocks.lfrb    little-endian binary; header = magic "LFRB", format
                 version (u32), context_length (u32), vocab_size (u32),
                 block_count (u64); body = block_count * L token ids (u32)
  manifest.json  tokenizer spec, source list, token counts, SHA-256 of
                 the block store
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, IngestError

MAGIC = b"LFRB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")  # magic, version, context_length, vocab_size, block_count

DEFAULT_STORE_NAME = "blocks.lfrb"
DEFAULT_MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class TokenizerSpec:
    """How raw source files become token ids.

    ``bytes``  treats each input byte as a token id (vocab 256).
    ``u16le`` / ``u32le``  ingest externally produced token-id files;
    ``vocab_size`` must then be supplied by the caller.
    """

    name: str = "bytes"
    vocab_size: int = 256
    separator_id: int | None = None

    def __post_init__(self) -> None:
        if self.name not in ("bytes", "u16le", "u32le"):
            raise IngestError(f"unknown tokenizer {self.name!r}")
        if self.vocab_size <= 0:
            raise IngestError("tokenizer vocabulary must be nonempty")
        if self.name == "bytes" and self.vocab_size != 256:
            raise IngestError("byte tokenizer has a fixed vocab of 256")
        if self.separator_id is not None and not (0 <= self.separator_id < self.vocab_size):
            raise IngestError(f"separator id {self.separator_id} outside vocab")

    def to_dict(self) -> dict:
        return {"name": self.name, "vocab_size": self.vocab_size, "separator_id": self.separator_id}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerSpec":
        return cls(name=d["name"], vocab_size=d["vocab_size"], separator_id=d.get("separator_id"))


@dataclass(frozen=True)
class TokenBlock:
    """One fixed-length slice of the token stream."""

    block_id: int
    tokens: np.ndarray  # shape (L,), uint32

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    """An immutable, loaded block store.  Safe to share across readers."""

    tokens: np.ndarray  # shape (n, L), uint32
    vocab_size: int
    context_length: int
    manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tokens.setflags(write=False)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def block_ids(self) -> range:
        return range(len(self))

    def block(self, block_id: int) -> TokenBlock:
        if not 0 <= block_id < len(self):
            raise IndexError(f"block id {block_id} outside corpus of {len(self)} blocks")
        return TokenBlock(block_id, self.tokens[block_id])

    def blocks(self):
        for i in self.block_ids:
            yield TokenBlock(i, self.tokens[i])

    @property
    def sha256(self) -> str:
        return self.manifest.get("block_store_sha256", "")


def tokenize_file(path: Path, spec: TokenizerSpec) -> np.ndarray:
    """Turn one source file into a 1-D array of token ids."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IngestError(f"cannot read source file {path}: {e}") from e
    if spec.name == "bytes":
        return np.frombuffer(raw, dtype=np.uint8).astype(np.uint32)
    dtype = np.dtype("<u2") if spec.name == "u16le" else np.dtype("<u4")
    if len(raw) % dtype.itemsize != 0:
        raise IngestError(f"{path}: size {len(raw)} is not a multiple of {dtype.itemsize}")
    ids = np.frombuffer(raw, dtype=dtype).astype(np.uint32)
    if ids.size and int(ids.max()) >= spec.vocab_size:
        raise IngestError(f"{path}: token id {int(ids.max())} >= vocab_size {spec.vocab_size}")
    return ids


def ingest(
    source_paths: list[Path | str],
    tokenizer: TokenizerSpec,
    context_length: int,
    out_dir: Path | str,
) -> Corpus:
    """Tokenize sources in order, chunk into blocks, persist store + manifest."""
    if context_length <= 0:
        raise IngestError("context_length must be positive")
    if not source_paths:
        raise IngestError("no source files given")

    parts: list[np.ndarray] = []
    sources = []
    sep = (
        np.array([tokenizer.separator_id], dtype=np.uint32)
        if tokenizer.separator_id is not None
        else None
    )
    for i, p in enumerate(source_paths):
        ids = tokenize_file(Path(p), tokenizer)
        if sep is not None and i > 0:
            parts.append(sep)
        parts.append(ids)
        sources.append({"path": str(p), "tokens": int(ids.size)})

    stream = np.concatenate(parts) if parts else np.empty(0, dtype=np.uint32)
    total = int(stream.size)
    n_blocks = total // context_length
    if n_blocks == 0:
        raise IngestError(f"corpus shorter than one block ({total} tokens < {context_length})")
    dropped = total - n_blocks * context_length
    blocks = stream[: n_blocks * context_length].reshape(n_blocks, context_length)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store_path = out_dir / DEFAULT_STORE_NAME
    write_block_store(store_path, blocks, tokenizer.vocab_size)

    manifest = {
        "format_version": FORMAT_VERSION,
        "tokenizer": tokenizer.to_dict(),
        "context_length": context_length,
        "sources": sources,
        "total_tokens": total,
        "dropped_tokens": dropped,
        "block_count": n_blocks,
        "block_store": store_path.name,
        "block_store_sha256": sha256_file(store_path),
    }
    manifest_path = out_dir / DEFAULT_MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")

    return Corpus(blocks, tokenizer.vocab_size, context_length, manifest)


def write_block_store(path: Path, blocks: np.ndarray, vocab_size: int) -> None:
    n, L = blocks.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, L, vocab_size, n))
        f.write(np.ascontiguousarray(blocks, dtype="<u4").tobytes())


def read_block_store(path: Path) -> tuple[np.ndarray, int, int]:
    """Parse a block store file; returns (blocks, vocab_size, context_length)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, ctx, vocab, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    body = data[_HEADER.size :]
    expected = count * ctx * 4
    if len(body) != expected:
        raise CorruptionError(f"{path}: body is {len(body)} bytes, expected {expected}")
    blocks = np.frombuffer(body, dtype="<u4").reshape(count, ctx).astype(np.uint32)
    return blocks, vocab, ctx


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load(manifest_path: Path | str) -> Corpus:
    """Load a persisted corpus, verifying checksum and header consistency."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as e:
        raise IngestError(f"cannot read manifest {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: not valid JSON: {e}") from e

    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{manifest_path}: manifest format version {manifest.get('format_version')}"
            f" != {FORMAT_VERSION}"
        )
    store_path = manifest_path.parent / manifest["block_store"]
    if not store_path.exists():
        raise CorruptionError(f"block store missing: {store_path}")
    digest = sha256_file(store_path)
    if digest != manifest["block_store_sha256"]:
        raise CorruptionError(
            f"{store_path}: checksum mismatch ({digest[:12]}... != recorded"
            f" {manifest['block_store_sha256'][:12]}...)"
        )

    blocks, vocab, ctx = read_block_store(store_path)
    if blocks.shape[0] != manifest["block_count"]:
        raise FormatError(
            f"{store_path}: holds {blocks.shape[0]} blocks, manifest says"
            f" {manifest['block_count']}"
        )
    if ctx != manifest["context_length"]:
        raise FormatError(
            f"{store_path}: context length {ctx} != manifest {manifest['context_length']}"
        )
    if vocab != manifest["tokenizer"]["vocab_size"]:
        raise FormatError(
            f"{store_path}: vocab {vocab} != manifest {manifest['tokenizer']['vocab_size']}"
        )
    return Corpus(blocks, vocab, ctx, manifest)
