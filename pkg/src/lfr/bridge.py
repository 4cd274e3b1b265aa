"""Sidecar protocol: external trainers consume batches, report NLLs.

Newline-delimited JSON (one message per line, UTF-8) over stdio or TCP.
The client opens with "hello" (protocol version + corpus checksum), then
loops "get_batch" / "report" until the server answers "end".  Message
ids are positive and strictly increasing per session on each side;
server replies carry ``re`` with the request id.  Reports are validated
in full before any record is applied, so a rejected report leaves the
ledger untouched.

Only block ids travel by default; clients hold the block store locally
(the hello checksum proves it is the same corpus).  A thin client may
request ``inline_tokens`` to receive token payloads with each batch.

The scheduler state is snapshotted after every emitted batch, so a
session killed mid-epoch resumes from the snapshot without re-emitting
ids already handed out; the batch in flight at the kill is counted as
delivered.
"""

from __future__ import annotations

import json
import math
import socket
import sys
from pathlib import Path
from typing import IO

from .errors import EngineError, ProtocolError
from .ledger import PplLedger
from .scheduler import SchedulerConfig, SchedulerState

PROTOCOL_VERSION = 1


def encode_message(msg: dict) -> str:
    return json.dumps(msg, separators=(",", ":")) + "\n"


def decode_message(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed message: {e}") from e
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise ProtocolError("message must be an object with a string 'type'")
    return msg


class BridgeServer:
    """One scheduler instance served over a sequence of sessions."""

    def __init__(
        self,
        corpus,
        config: SchedulerConfig,
        ledger: PplLedger,
        out_dir: Path | str | None = None,
        snapshot_path: Path | str | None = None,
        transcript_path: Path | str | None = None,
    ):
        self.corpus = corpus
        self.ledger = ledger
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        self._transcript: IO | None = (
            open(transcript_path, "a") if transcript_path else None
        )
        if self.snapshot_path is not None and self.snapshot_path.exists():
            self.state = SchedulerState.load_snapshot(self.snapshot_path, ledger, out_dir)
        else:
            self.state = SchedulerState(config, len(corpus), ledger, artifacts_dir=out_dir)
        self.finished = False  # an "end" was delivered

    # -- session ------------------------------------------------------------

    def handle_session(self, rfile: IO, wfile: IO) -> None:
        """Run one client session over text-mode line streams."""
        server_id = 0
        last_client_id = 0
        hello_seen = False
        inline_tokens = False

        def send(msg: dict, re: int | None = None) -> None:
            nonlocal server_id
            server_id += 1
            msg = {"id": server_id, **({"re": re} if re is not None else {}), **msg}
            line = encode_message(msg)
            wfile.write(line)
            wfile.flush()
            self._log("out", msg)

        def phase_info(re: int) -> None:
            if self.state.exhausted or self.state.phase_index >= len(
                self.state.schedule.phases
            ):
                send({"type": "phase_info", "exhausted": True, "step": self.state.step}, re)
                return
            send(
                {
                    "type": "phase_info",
                    "exhausted": False,
                    "step": self.state.step,
                    "phase": {
                        "index": self.state.phase_index,
                        "kind": self.state.current_phase.kind.value,
                        "epoch": self.state.epoch_in_phase,
                    },
                    "n_blocks": self.state.n_blocks,
                    "protocol_version": PROTOCOL_VERSION,
                },
                re,
            )

        for line in rfile:
            if not line.strip():
                continue
            try:
                msg = decode_message(line)
            except ProtocolError as e:
                send({"type": "error", "message": str(e)})
                continue
            self._log("in", msg)
            mid = msg.get("id")
            if not isinstance(mid, int) or mid <= last_client_id:
                send({"type": "error", "message": f"message id must increase (last {last_client_id}, got {mid!r})"})
                continue
            last_client_id = mid
            mtype = msg["type"]

            if mtype == "hello":
                if msg.get("protocol_version") != PROTOCOL_VERSION:
                    send(
                        {"type": "error",
                         "message": f"incompatible protocol version {msg.get('protocol_version')!r},"
                                    f" server speaks {PROTOCOL_VERSION}"},
                        mid,
                    )
                    return
                expected = getattr(self.corpus, "sha256", "")
                if expected and msg.get("corpus_sha256") != expected:
                    send(
                        {"type": "error",
                         "message": f"corpus checksum mismatch: session has"
                                    f" {str(msg.get('corpus_sha256'))[:12]}..., server has {expected[:12]}..."},
                        mid,
                    )
                    return
                inline_tokens = bool(msg.get("inline_tokens", False))
                if inline_tokens and not hasattr(self.corpus, "tokens"):
                    send({"type": "error", "message": "server corpus has no token payloads"}, mid)
                    return
                if (bs := msg.get("batch_size")) is not None:
                    if not isinstance(bs, int) or bs < 1:
                        send({"type": "error", "message": f"bad batch_size {bs!r}"}, mid)
                        return
                    self.state.config.batch_size = bs
                hello_seen = True
                phase_info(mid)
                continue

            if not hello_seen:
                send({"type": "error", "message": "hello required before any other message"}, mid)
                continue

            if mtype == "get_batch":
                if (bs := msg.get("batch_size")) is not None:
                    if not isinstance(bs, int) or bs < 1:
                        send({"type": "error", "message": f"bad batch_size {bs!r}"}, mid)
                        continue
                    self.state.config.batch_size = bs
                try:
                    batch = self.state.next_batch()
                except EngineError as e:
                    # e.g. a Focus transition before any reports landed; the
                    # state is untouched, so the client may report and retry
                    send({"type": "error", "message": str(e)}, mid)
                    continue
                if batch is None:
                    self.finished = True
                    self._persist()
                    send({"type": "end", "step": self.state.step}, mid)
                    continue
                payload = {
                    "type": "batch",
                    "block_ids": list(batch.block_ids),
                    "step": batch.step,
                    "phase": {
                        "index": batch.phase_index,
                        "kind": batch.phase_kind.value,
                        "epoch": batch.epoch_in_phase,
                    },
                    "records_enabled": batch.records_enabled,
                }
                if inline_tokens:
                    payload["tokens"] = self.corpus.tokens[list(batch.block_ids)].tolist()
                self._persist()
                send(payload, mid)
            elif mtype == "report":
                try:
                    self._apply_report(msg)
                except ProtocolError as e:
                    send({"type": "error", "message": str(e)}, mid)
                    continue
                self.ledger.flush()
                phase_info(mid)
            elif mtype == "end":
                send({"type": "end", "step": self.state.step}, mid)
                self._persist()
                return
            else:
                send({"type": "error", "message": f"unknown message type {mtype!r}"}, mid)
        # EOF without "end": persist so a reconnecting session resumes
        self._persist()

    def _apply_report(self, msg: dict) -> int:
        records = msg.get("records")
        if not isinstance(records, list) or not records:
            raise ProtocolError("report needs a nonempty 'records' list")
        staged = []
        last_step: dict[int, int] = {}
        for i, rec in enumerate(records):
            try:
                bid = int(rec["block_id"])
                step = int(rec["step"])
                nll = float(rec["mean_nll"])
            except (KeyError, TypeError, ValueError) as e:
                raise ProtocolError(f"record {i} is malformed: {e}") from e
            if not math.isfinite(nll):
                raise ProtocolError(f"record {i} (block {bid}): mean_nll is not finite")
            if self.state.n_blocks is not None and not 0 <= bid < self.state.n_blocks:
                raise ProtocolError(f"record {i}: block id {bid} outside corpus")
            recorded = self.ledger.last_step(bid)
            floor = max(recorded if recorded is not None else -1, last_step.get(bid, -1))
            if step <= floor:
                raise ProtocolError(
                    f"record {i} (block {bid}): step {step} not after last recorded step {floor}"
                )
            last_step[bid] = step
            try:
                ppl = math.exp(nll)
            except OverflowError:
                raise ProtocolError(
                    f"record {i} (block {bid}): mean_nll {nll} overflows perplexity"
                ) from None
            staged.append((bid, step, ppl))
        for bid, step, ppl in staged:
            self.ledger.record(bid, step, ppl)
        return len(staged)

    def _persist(self) -> None:
        if self.snapshot_path is not None:
            self.state.save_snapshot(self.snapshot_path)
        self.ledger.flush()

    def _log(self, direction: str, msg: dict) -> None:
        if self._transcript is not None:
            self._transcript.write(json.dumps({"dir": direction, "msg": msg}) + "\n")
            self._transcript.flush()

    # -- transports ---------------------------------------------------------

    def serve_stdio(self) -> None:
        self.handle_session(sys.stdin, sys.stdout)

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0, max_sessions: int | None = None) -> None:
        """Accept sessions sequentially until the schedule has ended."""
        srv = socket.create_server((host, port))
        bound = srv.getsockname()[1]
        print(f"listening on tcp:{bound}", file=sys.stderr, flush=True)
        sessions = 0
        try:
            while not self.finished and (max_sessions is None or sessions < max_sessions):
                conn, _ = srv.accept()
                sessions += 1
                with conn:
                    rfile = conn.makefile("r", encoding="utf-8", newline="\n")
                    wfile = conn.makefile("w", encoding="utf-8", newline="\n")
                    self.handle_session(rfile, wfile)
        finally:
            srv.close()
            if self._transcript is not None:
                self._transcript.close()
