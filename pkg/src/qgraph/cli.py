"""qgraph command line.

Exit codes: 0 ok, 1 I/O, 2 validation, 3 calibration, 4 missing tap entry,
5 worker failure, 6 tolerance exceeded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import graph as graph_io
from .calibration import CalibrationMode, CalibrationTable, calibrate
from .errors import (
    EmptyHistogram,
    ExecutionError,
    InsufficientMass,
    MissingTapEntry,
    SchemaError,
    UnknownTap,
    WorkerError,
)
from .executor import Executor
from .graph import Graph, census_json, op_census, validate
from .model import ToyConfig, build_toy_transformer
from .pipeline import (
    load_corpus,
    make_batches,
    output_hash,
    run_parallel,
    run_serial,
    sample_calibration,
    save_corpus,
    sentence_feed,
    sort_sentences,
    synthetic_corpus,
    tensor_hash,
    throughput_report,
)
from .rewriter import PASSES, rel_l2, run_passes, verify_equivalence

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_CALIBRATION, EXIT_MISSING_TAP, EXIT_WORKER, EXIT_TOLERANCE = range(7)


class Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("QGRAPH_SEED", "0"))


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise Fail(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from exc


def _write(path: str, data: bytes | str) -> None:
    try:
        p = Path(path)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True)
        p.write_bytes(data.encode() if isinstance(data, str) else data)
    except OSError as exc:
        raise Fail(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from exc


def _load_graph(path: str) -> Graph:
    try:
        g = graph_io.load(_read(path))
    except (SchemaError, ValueError) as exc:
        raise Fail(EXIT_VALIDATION, f"{path}: {exc}") from exc
    report = validate(g)
    if report.issues:
        first = report.issues[0]
        raise Fail(EXIT_VALIDATION, f"{path}: {len(report.issues)} validation issue(s), first {first.node}: {first.message}")
    return g


def _load_corpus(path: str):
    try:
        Path(path).stat()
    except OSError as exc:
        raise Fail(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return load_corpus(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise Fail(EXIT_VALIDATION, f"{path}: bad corpus: {exc}") from exc


def _load_table(path: str) -> CalibrationTable:
    try:
        return CalibrationTable.loads(_read(path))
    except (ValueError, KeyError, TypeError) as exc:
        raise Fail(EXIT_VALIDATION, f"{path}: bad calibration table: {exc}") from exc


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_toy(args) -> int:
    cfg = ToyConfig(
        d_model=args.d_model,
        heads=args.heads,
        layers=args.layers,
        vocab=args.vocab,
        seq=args.seq,
        decode_steps=args.decode_steps,
        beam=args.beam,
        seed=_seed(args),
        weights=args.weights,
    )
    g = build_toy_transformer(cfg)
    _write(args.out, graph_io.save(g))
    print(f"wrote {args.out}: {sum(op_census(g).values())} nodes, {op_census(g)[graph_io.OpKind.MatMul]} MatMul")
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    sentences = synthetic_corpus(args.n, _seed(args), vocab=args.vocab)
    try:
        save_corpus(sentences, args.out)
    except OSError as exc:
        raise Fail(EXIT_IO, f"cannot write {args.out}: {exc.strerror or exc}") from exc
    print(f"wrote {args.out}: {len(sentences)} sentences")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    g = _load_graph(args.graph)
    corpus = _load_corpus(args.corpus)
    try:
        picked = sample_calibration(corpus, args.samples, _seed(args))
    except ValueError as exc:
        raise Fail(EXIT_CALIBRATION, str(exc)) from exc
    feeds = [sentence_feed(s.tokens) for s in picked]
    try:
        table = calibrate(g, feeds, mode=CalibrationMode(args.mode))
    except ExecutionError as exc:
        raise Fail(EXIT_VALIDATION, f"calibration run failed: {exc}") from exc
    except (InsufficientMass, EmptyHistogram, UnknownTap) as exc:
        raise Fail(EXIT_CALIBRATION, f"calibration failed: {exc}") from exc
    _write(args.out, table.dumps())
    counts: dict[str, int] = {}
    for e in table.taps.values():
        counts[e.cls.value] = counts.get(e.cls.value, 0) + 1
    summary = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    print(f"wrote {args.out}: {len(table.taps)} taps ({summary})")
    return EXIT_OK


def cmd_quantize(args) -> int:
    g = _load_graph(args.graph)
    passes = [p.strip() for p in args.passes.split(",") if p.strip()]
    bad = [p for p in passes if p not in PASSES]
    if bad or not passes:
        raise Fail(EXIT_VALIDATION, f"unknown pass(es) {bad}; choose from {', '.join(PASSES)}")
    table = _load_table(args.table) if args.table else None
    if "calibrated" in passes and table is None:
        raise Fail(EXIT_VALIDATION, "the calibrated pass needs --table")
    try:
        out, reports = run_passes(g, passes, table)
    except MissingTapEntry as exc:
        raise Fail(EXIT_MISSING_TAP, f"calibration table has no entry for tap {exc.args[0]!r}") from exc
    _write(args.out, graph_io.save(out))
    if args.emit_pass_report:
        _write(args.emit_pass_report, _dump_json([r.to_json() for r in reports]))
    for r in reports:
        print(f"{r.name}: +{len(r.added)} -{len(r.removed)} ~{len(r.replaced)}")
    print(json.dumps(census_json(op_census(out)), sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    g = _load_graph(args.graph)
    corpus = _load_corpus(args.corpus)
    if args.batch < 1 or args.workers < 1 or args.repeat < 1:
        raise Fail(EXIT_VALIDATION, "--batch, --workers and --repeat must be >= 1")
    batches = make_batches(sort_sentences(corpus, args.sort), args.batch)
    runs = []
    try:
        for k in range(args.repeat):
            if args.workers == 1:
                result = run_serial(g, batches)
            else:
                result = run_parallel(g, batches, args.workers)
            label = f"sort={args.sort} batch={args.batch} workers={args.workers}"
            runs.append((label if args.repeat == 1 else f"{label} rep={k}", result))
    except WorkerError as exc:
        raise Fail(EXIT_WORKER, str(exc)) from exc
    result = runs[-1][1]
    rows = throughput_report(runs)
    if args.results:
        lines = []
        for sid in sorted(result.outputs):
            rec = {"id": sid, "output_hash": tensor_hash(result.outputs[sid])}
            if args.with_output:
                rec["output"] = result.outputs[sid].to_json()
            lines.append(json.dumps(rec, sort_keys=True))
        _write(args.results, "".join(line + "\n" for line in lines))
    if args.report:
        _write(args.report, _dump_json(rows))
    if args.trace:
        ex = Executor(g)
        lines = []
        for b in batches:
            for sid, row in zip(b.ids, b.padded):
                trace: list = []
                ex.run(sentence_feed(row), trace=trace)
                lines += [json.dumps({"sentence": sid, **r}, sort_keys=True) for r in trace]
        _write(args.trace, "".join(line + "\n" for line in lines))
    row = rows[-1]
    print(
        f"{row['sentences']} sentences in {row['batches']} batches, "
        f"{row['sentences_per_sec']:.1f} sentences/s, padding waste {row['padding_waste_pct']:.2f}%, "
        f"hash {output_hash(result.outputs)[:16]}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    g1 = _load_graph(args.fp32)
    g2 = _load_graph(args.int8)
    corpus = _load_corpus(args.corpus)
    if args.limit is not None:
        corpus = corpus[: args.limit]
    feeds = [sentence_feed(s.tokens) for s in corpus]
    try:
        report = verify_equivalence(g1, g2, feeds, args.tol)
    except ExecutionError as exc:
        raise Fail(EXIT_VALIDATION, f"execution failed: {exc}") from exc
    except ValueError as exc:
        raise Fail(EXIT_VALIDATION, str(exc)) from exc
    for name, d in sorted(report.deltas.items()):
        print(f"{name}: max_abs={d.max_abs:.6g} rel_l2={d.rel_l2:.6g}")
    if args.json:
        _write(args.json, _dump_json(report.to_json()))
    if not report.passed:
        print(f"tolerance {args.tol:g} exceeded (worst rel_l2 {report.worst_rel_l2:.6g})", file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qgraph", description="INT8 post-training quantization for a toy graph IR.")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help="default: $QGRAPH_SEED or 0")

    sp = sub.add_parser("build-toy", help="write the toy transformer graph")
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", choices=["gaussian", "long_tailed"], default="gaussian")
    defaults = ToyConfig()
    for name in ("d_model", "heads", "layers", "vocab", "seq", "decode_steps", "beam"):
        sp.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    seeded(sp)
    sp.set_defaults(func=cmd_build_toy)

    sp = sub.add_parser("make-corpus", help="write a synthetic geometric-length corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=512)
    sp.add_argument("--vocab", type=int, default=defaults.vocab)
    seeded(sp)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("calibrate", help="collect histograms and search thresholds")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--samples", type=int, default=600)
    sp.add_argument("--mode", choices=[m.value for m in CalibrationMode], default="Symmetric")
    sp.add_argument("--out", required=True)
    seeded(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("quantize", help="apply rewrite passes")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--table")
    sp.add_argument("--passes", required=True, help=f"comma-separated, from {', '.join(PASSES)}")
    sp.add_argument("--out", required=True)
    sp.add_argument("--emit-pass-report", dest="emit_pass_report")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("run", help="batch a corpus and execute it")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--sort", choices=["tokens", "words", "none"], default="tokens")
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--repeat", type=int, default=1, help="repeat the run K times (benchmark mode)")
    sp.add_argument("--report", help="throughput report JSON")
    sp.add_argument("--results", help="per-sentence results JSONL")
    sp.add_argument("--with-output", action="store_true", help="include output tensors in results")
    sp.add_argument("--trace", help="op trace JSONL")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="gate INT8 outputs against FP32")
    sp.add_argument("--fp32", required=True)
    sp.add_argument("--int8", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--tol", type=float, default=5e-2)
    sp.add_argument("--limit", type=int, help="compare on the first N sentences only")
    sp.add_argument("--json", help="write the comparison report here")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Fail as exc:
        print(f"qgraph {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
