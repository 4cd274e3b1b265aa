"""Thin client for the Learn-Focus-Revise scheduling bridge.

Standard library only, so it can be vendored into any training repo.
Speaks the newline-delimited JSON protocol: "hello" with a protocol
version and the corpus checksum (read from the manifest), then
"get_batch" / "report" until the server answers "end".

    from lfr_pyclient import connect

    with connect("tcp:127.0.0.1:9000", "runs/corpus/manifest.json") as session:
        for batch in session.batches(batch_size=32):
            nlls = my_trainer.step(batch.block_ids)   # mean NLL per block
            session.report(
                (bid, batch.step, nll) for bid, nll in zip(batch.block_ids, nlls)
            )

One session per process.  Handing batches to a data-loader thread is the
caller's responsibility; the session object itself is not thread-safe.
Floats are serialized by ``json`` with ``repr`` semantics (shortest
round-trip, up to 17 significant digits), so reported NLLs survive the
wire exactly.
"""

from __future__ import annotations

import json
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

PROTOCOL_VERSION = 1


class ClientError(Exception):
    """Base class for client-side failures."""


class ConnectError(ClientError):
    """The endpoint could not be reached."""


class ProtocolMismatch(ClientError):
    """Server refused the protocol version."""


class ChecksumMismatch(ClientError):
    """Server serves a different corpus than the local manifest."""


class ServerError(ClientError):
    """The server answered with an error message."""


class SessionClosed(ClientError):
    """The transport dropped before the schedule ended."""


@dataclass(frozen=True)
class PhaseInfo:
    index: int
    kind: str
    epoch: int


@dataclass(frozen=True)
class BlockBatch:
    block_ids: tuple[int, ...]
    step: int
    phase: PhaseInfo
    records_enabled: bool
    tokens: list[list[int]] | None = None


@dataclass
class ClientSession:
    """State machine: hello -> (get_batch | report)* -> end."""

    _sock: socket.socket
    _rfile: object
    _wfile: object
    endpoint: str
    phase: PhaseInfo | None = None
    n_blocks: int | None = None
    exhausted: bool = False
    _next_id: int = 0
    _last_server_id: int = 0
    _closed: bool = field(default=False, repr=False)

    # -- wire ---------------------------------------------------------------

    def _request(self, mtype: str, **payload) -> dict:
        if self._closed:
            raise SessionClosed("session already closed")
        self._next_id += 1
        msg = {"id": self._next_id, "type": mtype, **payload}
        self._wfile.write(json.dumps(msg) + "\n")
        self._wfile.flush()
        line = self._rfile.readline()
        if not line:
            raise SessionClosed(f"server at {self.endpoint} closed the connection")
        resp = json.loads(line)
        sid = resp.get("id", 0)
        if not isinstance(sid, int) or sid <= self._last_server_id:
            raise ClientError(
                f"server message ids must increase (last {self._last_server_id}, got {sid!r})"
            )
        self._last_server_id = sid
        if resp.get("re") not in (None, msg["id"]):
            raise ClientError(f"response {sid} answers request {resp['re']}, expected {msg['id']}")
        if resp.get("type") == "error":
            raise ServerError(resp.get("message", "unspecified server error"))
        return resp

    def _absorb_phase(self, resp: dict) -> None:
        if resp.get("exhausted"):
            self.exhausted = True
            return
        p = resp.get("phase")
        if p:
            self.phase = PhaseInfo(p["index"], p["kind"], p["epoch"])
        if resp.get("n_blocks") is not None:
            self.n_blocks = resp["n_blocks"]

    # -- operations ---------------------------------------------------------

    def batches(self, batch_size: int | None = None) -> Iterator[BlockBatch]:
        """Yield batches until the schedule ends; never reorders or drops."""
        while True:
            payload = {} if batch_size is None else {"batch_size": batch_size}
            resp = self._request("get_batch", **payload)
            if resp["type"] == "end":
                self.exhausted = True
                return
            if resp["type"] != "batch":
                raise ClientError(f"expected batch, got {resp['type']!r}")
            p = resp["phase"]
            self.phase = PhaseInfo(p["index"], p["kind"], p["epoch"])
            yield BlockBatch(
                block_ids=tuple(resp["block_ids"]),
                step=resp["step"],
                phase=self.phase,
                records_enabled=resp.get("records_enabled", True),
                tokens=resp.get("tokens"),
            )

    def report(self, records: Iterable[tuple[int, int, float] | dict]) -> PhaseInfo | None:
        """Send per-block mean NLLs; returns the server's phase after the ack."""
        payload = []
        for rec in records:
            if isinstance(rec, dict):
                payload.append({"block_id": rec["block_id"], "step": rec["step"],
                                "mean_nll": rec["mean_nll"]})
            else:
                bid, step, nll = rec
                payload.append({"block_id": int(bid), "step": int(step),
                                "mean_nll": float(nll)})
        resp = self._request("report", records=payload)
        if resp["type"] != "phase_info":
            raise ClientError(f"expected phase_info ack, got {resp['type']!r}")
        self._absorb_phase(resp)
        return self.phase

    def end(self) -> None:
        """Graceful shutdown; the server persists its cursor."""
        if not self._closed:
            try:
                self._request("end")
            finally:
                self.close()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            # makefile wrappers hold the fd open; close them so the server
            # sees EOF promptly
            for f in (self._rfile, self._wfile):
                try:
                    f.close()
                except OSError:
                    pass
            self._sock.close()

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, exc_type, *rest) -> None:
        if exc_type is None and not self.exhausted:
            self.end()
        else:
            self.close()


def corpus_checksum(manifest_path: str | Path) -> str:
    manifest = json.loads(Path(manifest_path).read_text())
    return manifest["block_store_sha256"]


def connect(
    endpoint: str,
    corpus_manifest: str | Path | None = None,
    batch_size: int | None = None,
    inline_tokens: bool = False,
    timeout: float | None = 30.0,
) -> ClientSession:
    """Open a session: dial, exchange hello, validate version + checksum.

    ``endpoint`` is "tcp:<host>:<port>" or "tcp:<port>" (localhost).  The
    corpus manifest supplies the checksum proving both sides hold the
    same block store; omit it only against servers without one.
    """
    if not endpoint.startswith("tcp:"):
        raise ConnectError(f"unsupported endpoint {endpoint!r}; expected tcp:<host>:<port>")
    parts = endpoint.split(":")
    host, port = (parts[1], int(parts[2])) if len(parts) == 3 else ("127.0.0.1", int(parts[1]))
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise ConnectError(f"cannot reach {endpoint}: {e}") from e
    session = ClientSession(
        _sock=sock,
        _rfile=sock.makefile("r", encoding="utf-8", newline="\n"),
        _wfile=sock.makefile("w", encoding="utf-8", newline="\n"),
        endpoint=endpoint,
    )
    checksum = corpus_checksum(corpus_manifest) if corpus_manifest else ""
    hello = {"protocol_version": PROTOCOL_VERSION, "corpus_sha256": checksum}
    if batch_size is not None:
        hello["batch_size"] = batch_size
    if inline_tokens:
        hello["inline_tokens"] = True
    try:
        resp = session._request("hello", **hello)
    except ServerError as e:
        session.close()
        text = str(e)
        if "version" in text:
            raise ProtocolMismatch(text) from e
        if "checksum" in text:
            raise ChecksumMismatch(text) from e
        raise
    if resp["type"] != "phase_info":
        session.close()
        raise ClientError(f"expected phase_info after hello, got {resp['type']!r}")
    session._absorb_phase(resp)
    return session
