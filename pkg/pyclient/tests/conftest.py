"""Fixtures that stand up a real served engine as a subprocess.

The client package is exercised strictly over the engine's external
surfaces: the `lfr` CLI, the manifest JSON, the ndjson wire protocol,
and the documented append-only ledger record format.
"""

from __future__ import annotations

import json
import re
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

LEDGER_RECORD = struct.Struct("<QQdH")


def run_cli(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "lfr.cli", *args],
        check=True, capture_output=True, text=True,
    )


@pytest.fixture
def corpus(tmp_path: Path) -> dict:
    rng = np.random.default_rng(0)
    sources = []
    for i in range(2):
        p = tmp_path / f"doc{i}.bin"
        p.write_bytes(bytes(rng.integers(0, 256, 2000, dtype=np.uint8)))
        sources.append(str(p))
    out = tmp_path / "corpus"
    run_cli("ingest", "--out", str(out), "--context-length", "50", *sources)
    manifest = out / "manifest.json"
    meta = json.loads(manifest.read_text())
    return {"manifest": manifest, "n_blocks": meta["block_count"], "dir": out}


@pytest.fixture
def schedule_file(tmp_path: Path) -> Path:
    path = tmp_path / "schedule.json"
    path.write_text(json.dumps({
        "phases": [
            {"kind": "learn", "epochs": 1},
            {"kind": "focus", "epochs": 1, "keep_fraction": 0.5},
            {"kind": "revise", "epochs": 1},
        ],
        "batch_size": 8,
        "seed": 3,
    }))
    return path


class ServedEngine:
    def __init__(self, proc: subprocess.Popen, port: int, paths: dict):
        self.proc = proc
        self.port = port
        self.paths = paths

    @property
    def endpoint(self) -> str:
        return f"tcp:127.0.0.1:{self.port}"

    def wait(self, timeout: float = 30.0) -> int:
        return self.proc.wait(timeout=timeout)

    def read_ledger(self) -> list[tuple[int, int, float, int]]:
        raw = self.paths["ledger"].read_bytes()
        return [LEDGER_RECORD.unpack_from(raw, off)
                for off in range(0, len(raw), LEDGER_RECORD.size)]

    def stop(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


def start_server(tmp_path: Path, corpus: dict, schedule_file: Path,
                 tag: str = "run", snapshot: bool = False,
                 transcript: bool = False) -> ServedEngine:
    run_dir = tmp_path / tag
    run_dir.mkdir(exist_ok=True)
    paths = {"ledger": run_dir / "ledger.bin", "out": run_dir,
             "snapshot": run_dir / "state.json", "transcript": run_dir / "wire.ndjson"}
    cmd = [
        sys.executable, "-m", "lfr.cli", "serve",
        "--schedule", str(schedule_file),
        "--corpus", str(corpus["manifest"]),
        "--ledger", str(paths["ledger"]),
        "--out", str(run_dir),
        "--listen", "tcp:0",
    ]
    if snapshot:
        cmd += ["--snapshot", str(paths["snapshot"])]
    if transcript:
        cmd += ["--transcript", str(paths["transcript"])]
    proc = subprocess.Popen(cmd, stderr=subprocess.PIPE, text=True)
    line = proc.stderr.readline()
    m = re.search(r"listening on tcp:(\d+)", line)
    if not m:
        proc.terminate()
        raise RuntimeError(f"server did not announce a port: {line!r}")
    return ServedEngine(proc, int(m.group(1)), paths)


@pytest.fixture
def server_factory(tmp_path):
    started: list[ServedEngine] = []

    def factory(corpus, schedule_file, **kw) -> ServedEngine:
        engine = start_server(tmp_path, corpus, schedule_file, **kw)
        started.append(engine)
        return engine

    yield factory
    for engine in started:
        engine.stop()


@pytest.fixture
def server(corpus, schedule_file, server_factory):
    return server_factory(corpus, schedule_file)
