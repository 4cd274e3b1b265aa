"""Command-line entry points.

    lfr ingest   --out runs/corpus data/*.txt
    lfr train    --corpus runs/corpus/manifest.json --schedule sched.json --learner tiny
    lfr simulate --strategy all --blocks 1000 --epochs 8
    lfr analyze  classify|report|compare ...
    lfr serve    --corpus ... --schedule ... --ledger ... --listen tcp:9000
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .bridge import BridgeServer
from .clustering import compare_sets, load_id_file, write_stats_csv
from .engine import eval_corpus_ppls, run_training
from .errors import ConfigError, EngineError
from .experiments import format_comparison_table, strategy_comparison
from .ledger import PplLedger, TrajectoryKind
from .learner.synthetic import SyntheticLearner, SyntheticLearnerConfig
from .learner.tinylm import TinyLM, TinyLMConfig
from .scheduler import STRATEGIES, load_schedule_config


def _load_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def cmd_ingest(args) -> int:
    spec = corpus_mod.TokenizerSpec(
        name=args.tokenizer,
        vocab_size=256 if args.tokenizer == "bytes" else args.vocab_size,
        separator_id=args.separator_id,
    )
    c = corpus_mod.ingest(args.sources, spec, args.context_length, args.out)
    print(
        f"ingested {c.manifest['total_tokens']} tokens from {len(args.sources)} file(s)"
        f" -> {len(c)} blocks of {c.context_length}"
        f" ({c.manifest['dropped_tokens']} trailing tokens dropped)"
    )
    print(f"manifest: {Path(args.out) / corpus_mod.DEFAULT_MANIFEST_NAME}")
    return 0


def _build_learner(args, c):
    cfg = _load_json(args.learner_config)
    if args.learner == "tiny":
        cfg.setdefault("vocab_size", c.vocab_size)
        return TinyLM(TinyLMConfig(**cfg))
    if args.learner == "synthetic":
        return SyntheticLearner(SyntheticLearnerConfig(**cfg), len(c))
    raise ConfigError(f"unknown learner {args.learner!r}")


def cmd_train(args) -> int:
    c = corpus_mod.load(args.corpus)
    config = load_schedule_config(args.schedule)
    learner = _build_learner(args, c)
    if hasattr(learner, "param_count"):
        print(f"learner parameters: {learner.param_count}")
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = args.ledger or (out_dir / "ledger.bin" if out_dir else None)
    with PplLedger(ledger_path, n_blocks=len(c)) as ledger:
        result = run_training(
            c, learner, config, ledger,
            out_dir=out_dir, snapshot_path=args.snapshot, log_every=args.log_every,
        )
        print(
            f"trained {result.steps} steps / {result.epochs_completed} epochs"
            f" in {result.wall_seconds:.1f}s"
        )
        if args.save_checkpoint and hasattr(learner, "save"):
            learner.save(args.save_checkpoint)
            print(f"checkpoint: {args.save_checkpoint}")
        ppls = eval_corpus_ppls(c, learner)
        print(f"final corpus mean ppl: {ppls.mean():.4f}")
    return 0


def cmd_simulate(args) -> int:
    strategies = STRATEGIES if args.strategy == "all" else (args.strategy,)
    cfg = SyntheticLearnerConfig(**_load_json(args.config))
    outcomes = strategy_comparison(
        strategies,
        n_blocks=args.blocks,
        epochs=args.epochs,
        seeds=tuple(range(args.seeds)),
        learner_config=cfg,
        batch_size=args.batch_size,
    )
    print(format_comparison_table(outcomes))
    return 0


def cmd_analyze(args) -> int:
    if args.what == "classify":
        ledger = PplLedger.load(args.ledger)
        classes = ledger.classify_all(args.epsilon)
        if args.per_block:
            for bid in sorted(classes):
                c = classes[bid]
                extra = f",{c.descent_count}" if c.kind is TrajectoryKind.FORGOTTEN else ""
                print(f"{bid},{c.kind.value}{extra}")
        counts: dict[str, int] = {}
        for c in classes.values():
            counts[c.kind.value] = counts.get(c.kind.value, 0) + 1
        print(json.dumps({"epsilon": args.epsilon, "class_counts": counts}, indent=2))
        return 0
    if args.what == "report":
        ledger = PplLedger.load(args.ledger)
        print(json.dumps(ledger.forgetting_report(args.epsilon).to_dict(), indent=2))
        return 0
    if args.what == "export-csv":
        PplLedger.load(args.ledger).export_csv(args.out)
        print(f"wrote {args.out}")
        return 0
    if args.what == "compare":
        c = corpus_mod.load(args.corpus)
        result = compare_sets(
            c,
            load_id_file(args.a),
            load_id_file(args.b),
            label_a=Path(args.a).stem,
            label_b=Path(args.b).stem,
            k=args.k,
            method=args.method,
            seed=args.seed,
            out_dir=args.out,
        )
        print(
            f"{result.label_a} ({result.k_a} clusters) vs {result.label_b}"
            f" ({result.k_b} clusters): mean={result.stats.mean:.4f}"
            f" std={result.stats.std:.4f} variance={result.stats.variance:.4f}"
        )
        if args.out:
            write_stats_csv([result], Path(args.out) / "stats.csv")
            print(f"matrix: {result.csv_path}\nheatmap: {result.heatmap_path}")
        return 0
    raise ConfigError(f"unknown analyze subcommand {args.what!r}")


def cmd_serve(args) -> int:
    c = corpus_mod.load(args.corpus)
    config = load_schedule_config(args.schedule)
    transcript = args.transcript
    if transcript is None and args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        transcript = Path(args.out) / "wire.ndjson"
    with PplLedger(args.ledger, n_blocks=len(c)) as ledger:
        server = BridgeServer(
            c, config, ledger,
            out_dir=args.out, snapshot_path=args.snapshot, transcript_path=transcript,
        )
        if args.listen == "stdio":
            server.serve_stdio()
        elif args.listen.startswith("tcp:"):
            server.serve_tcp(port=int(args.listen.split(":", 1)[1]))
        else:
            raise ConfigError(f"--listen must be 'stdio' or 'tcp:<port>', got {args.listen!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lfr", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ingest", help="tokenize sources into a block store")
    q.add_argument("sources", nargs="+")
    q.add_argument("--out", required=True)
    q.add_argument("--context-length", type=int, default=1024)
    q.add_argument("--tokenizer", choices=("bytes", "u16le", "u32le"), default="bytes")
    q.add_argument("--vocab-size", type=int, default=256)
    q.add_argument("--separator-id", type=int, default=None)
    q.set_defaults(func=cmd_ingest)

    q = sub.add_parser("train", help="run a schedule against a learner in-process")
    q.add_argument("--corpus", required=True, help="path to manifest.json")
    q.add_argument("--schedule", required=True, help="schedule config JSON")
    q.add_argument("--learner", choices=("tiny", "synthetic"), default="tiny")
    q.add_argument("--learner-config", "--config", dest="learner_config", default=None)
    q.add_argument("--ledger", default=None)
    q.add_argument("--out", default=None)
    q.add_argument("--snapshot", default=None)
    q.add_argument("--save-checkpoint", default=None)
    q.add_argument("--log-every", type=int, default=None)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("simulate", help="strategy comparison on the synthetic learner")
    q.add_argument("--strategy", choices=STRATEGIES + ("all",), default="all")
    q.add_argument("--learner", choices=("synthetic",), default="synthetic")
    q.add_argument("--config", default=None, help="synthetic learner config JSON")
    q.add_argument("--blocks", type=int, default=1000)
    q.add_argument("--epochs", type=int, default=8)
    q.add_argument("--seeds", type=int, default=10)
    q.add_argument("--batch-size", type=int, default=32)
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("analyze", help="inspect ledgers and compare id sets")
    qa = q.add_subparsers(dest="what", required=True)
    c1 = qa.add_parser("classify")
    c1.add_argument("--ledger", required=True)
    c1.add_argument("--epsilon", type=float, default=0.0)
    c1.add_argument("--per-block", action="store_true")
    c2 = qa.add_parser("report")
    c2.add_argument("--ledger", required=True)
    c2.add_argument("--epsilon", type=float, default=0.0)
    c4 = qa.add_parser("export-csv")
    c4.add_argument("--ledger", required=True)
    c4.add_argument("--out", required=True)
    c3 = qa.add_parser("compare")
    c3.add_argument("--a", required=True, help="newline-delimited block id file")
    c3.add_argument("--b", required=True)
    c3.add_argument("--corpus", required=True)
    c3.add_argument("--k", type=int, default=None)
    c3.add_argument("--method", choices=("token-frequency", "learner-hidden"),
                    default="token-frequency")
    c3.add_argument("--seed", type=int, default=0)
    c3.add_argument("--out", default=None)
    q.set_defaults(func=cmd_analyze)

    q = sub.add_parser("serve", help="expose the scheduler over the wire protocol")
    q.add_argument("--schedule", required=True)
    q.add_argument("--corpus", required=True)
    q.add_argument("--ledger", required=True)
    q.add_argument("--listen", default="stdio")
    q.add_argument("--snapshot", default=None)
    q.add_argument("--out", default=None)
    q.add_argument("--transcript", default=None)
    q.set_defaults(func=cmd_serve)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
