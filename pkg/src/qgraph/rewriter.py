"""Graph-to-graph quantization passes.

Every pass is a pure function ``Graph -> (Graph, PassReport)``; input graphs
are never modified.  Passes descend into LoopRegion bodies.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .calibration import CalibrationTable
from .errors import MissingTapEntry
from .executor import Executor
from .graph import Graph, Node, OpKind, Ref, census_json, infer_dtypes, op_census
from .tensor import DType, Tensor


@dataclass
class PassReport:
    name: str
    added: list[tuple[str, OpKind]] = field(default_factory=list)
    removed: list[tuple[str, OpKind]] = field(default_factory=list)
    replaced: list[tuple[str, OpKind, OpKind]] = field(default_factory=list)
    before: Counter = field(default_factory=Counter)
    after: Counter = field(default_factory=Counter)

    @property
    def changed(self) -> bool:
        return bool(self.added or self.removed or self.replaced)

    def delta(self) -> Counter:
        """Census change implied by the add/remove/replace lists."""
        d: Counter = Counter()
        for _, k in self.added:
            d[k] += 1
        for _, k in self.removed:
            d[k] -= 1
        for _, old, new in self.replaced:
            d[old] -= 1
            d[new] += 1
        return d

    def to_json(self) -> dict:
        return {
            "pass": self.name,
            "added": [[i, k.value] for i, k in self.added],
            "removed": [[i, k.value] for i, k in self.removed],
            "replaced": [[i, a.value, b.value] for i, a, b in self.replaced],
            "census_before": census_json(self.before),
            "census_after": census_json(self.after),
        }


class _Level:
    """Mutable working copy of one graph level during a pass."""

    def __init__(self, g: Graph, path: str, report: PassReport):
        self.name = g.name
        self.nodes = dict(g.nodes)
        self.outputs = list(g.outputs)
        self.path = path
        self.report = report
        self._dtypes = infer_dtypes(g)

    def dtype(self, ref: Ref) -> DType:
        return self._dtypes[ref[0]][ref[1]]

    def fresh(self, base: str) -> str:
        nid, i = base, 1
        while nid in self.nodes:
            nid, i = f"{base}_{i}", i + 1
        return nid

    def add(self, base: str, kind: OpKind, inputs: Sequence[Ref], **attrs) -> str:
        nid = self.fresh(base)
        self.nodes[nid] = Node(nid, kind, tuple(inputs), attrs)
        self.report.added.append((self.path + nid, kind))
        return nid

    def const(self, base: str, value: float) -> Ref:
        return (self.add(base, OpKind.Const, (), value=Tensor.scalar(value)), 0)

    def replace(self, nid: str, kind: OpKind, inputs: Sequence[Ref], **attrs) -> None:
        old = self.nodes[nid]
        self.nodes[nid] = Node(nid, kind, tuple(inputs), attrs)
        self.report.replaced.append((self.path + nid, old.kind, kind))

    def remove(self, nid: str) -> None:
        node = self.nodes.pop(nid)
        self.report.removed.append((self.path + nid, node.kind))

    def uses(self, ref: Ref) -> list[tuple[str, int]]:
        return [
            (n.id, pos) for n in self.nodes.values() for pos, r in enumerate(n.inputs) if r == ref
        ]

    def rewire(self, edges: Mapping[tuple[str, int], Ref]) -> None:
        """Point input ``pos`` of node ``id`` at a new source for each edge."""
        for (nid, pos), ref in edges.items():
            node = self.nodes[nid]
            ins = list(node.inputs)
            ins[pos] = ref
            self.nodes[nid] = Node(nid, node.kind, tuple(ins), node.attrs)

    def _rename(self, old: str, new: str) -> None:
        node = self.nodes.pop(old)
        self.nodes[new] = Node(new, node.kind, node.inputs, node.attrs)
        swap = lambda r: (new, r[1]) if r[0] == old else r
        for nid, n in self.nodes.items():
            if any(r[0] == old for r in n.inputs):
                self.nodes[nid] = Node(nid, n.kind, tuple(swap(r) for r in n.inputs), n.attrs)
        self.outputs = [swap(r) for r in self.outputs]
        self._dtypes[new] = self._dtypes.pop(old, None)
        rep, full_old, full_new = self.report, self.path + old, self.path + new
        for i, (nid, k) in enumerate(rep.added):
            if nid == full_old:
                rep.added[i] = (full_new, k)
        for i, (nid, was, now) in enumerate(list(rep.replaced)):
            if nid == full_old:
                rep.replaced.remove((nid, was, now))
                rep.removed.append((full_old, was))
                rep.added.append((full_new, now))

    def hand_over(self, old: str, new: str) -> None:
        """Give node ``new`` the id ``old`` when ``old`` names a graph output.

        Keeps output names stable across passes; the node that held ``old``
        moves to ``old/quantized``.  Loop bodies are skipped since their
        outputs are positional.
        """
        if self.path or (new, 0) not in self.outputs:
            return
        self._rename(old, self.fresh(f"{old}/quantized"))
        self._rename(new, old)

    def build(self) -> Graph:
        return Graph(self.name, self.nodes, tuple(self.outputs))


LevelFn = Callable[[_Level, bool], None]


def _apply(g: Graph, fn: LevelFn, report: PassReport, path: str = "", in_loop: bool = False) -> Graph:
    nodes = dict(g.nodes)
    for nid, node in g.nodes.items():
        if node.kind is OpKind.LoopRegion:
            body = _apply(node.attrs["body"], fn, report, f"{path}{nid}/", True)
            if body != node.attrs["body"]:
                nodes[nid] = Node(nid, node.kind, node.inputs, {**node.attrs, "body": body})
    level = _Level(Graph(g.name, nodes, g.outputs), path, report)
    fn(level, in_loop)
    return level.build()


def _run_pass(name: str, g: Graph, fn: LevelFn) -> tuple[Graph, PassReport]:
    report = PassReport(name, before=op_census(g))
    out = _apply(g, fn, report)
    report.after = op_census(out)
    if not report.changed:
        return g, report
    return out, report


def _matmuls(level: _Level) -> Iterator[Node]:
    """F32 MatMuls in id order, re-read so earlier rewiring is visible."""
    ids = [
        n.id
        for n in sorted(level.nodes.values(), key=lambda n: n.id)
        if n.kind is OpKind.MatMul
        and level.dtype(n.inputs[0]) is DType.F32
        and level.dtype(n.inputs[1]) is DType.F32
    ]
    for nid in ids:
        yield level.nodes[nid]


def _matmul_attrs(node: Node) -> dict:
    return {k: node.attrs[k] for k in ("transpose_a", "transpose_b") if k in node.attrs}


def _redirect_output(level: _Level, old: Ref, new: Ref, edges: list[tuple[str, int]] | None = None) -> None:
    edges = level.uses(old) if edges is None else edges
    level.rewire({e: new for e in edges})
    level.outputs = [new if r == old else r for r in level.outputs]


# ---------------------------------------------------------------------------
# Naive quantization
# ---------------------------------------------------------------------------


def _naive_level(level: _Level, in_loop: bool) -> None:
    for mm in _matmuls(level):
        m = mm.id
        a, b = mm.inputs
        consumers = level.uses((m, 0))
        sides = []
        for tag, src, target in (("a", a, DType.S8), ("b", b, DType.U8)):
            lo = level.add(f"{m}/min_{tag}", OpKind.MinOp, [src])
            hi = level.add(f"{m}/max_{tag}", OpKind.MaxOp, [src])
            q = level.add(f"{m}/quantize_{tag}", OpKind.QuantizeV2, [src, (lo, 0), (hi, 0)], target=target.value)
            sides.append(q)
        qa, qb = sides
        level.replace(
            m,
            OpKind.QuantizedMatMul,
            [(qa, 0), (qb, 0), (qa, 1), (qa, 2), (qb, 1), (qb, 2)],
            **_matmul_attrs(mm),
        )
        rr = level.add(f"{m}/requant_range", OpKind.RequantizationRange, [(m, 0), (m, 1), (m, 2)])
        rq = level.add(f"{m}/requantize", OpKind.Requantize, [(m, 0), (m, 1), (m, 2), (rr, 0), (rr, 1)])
        dq = level.add(f"{m}/dequantize", OpKind.Dequantize, [(rq, 0), (rq, 1), (rq, 2)])
        _redirect_output(level, (m, 0), (dq, 0), consumers)
        level.hand_over(m, dq)


def naive_quantize_pass(g: Graph) -> tuple[Graph, PassReport]:
    """Quantize every F32 MatMul with runtime Min/Max ranges."""
    return _run_pass("naive", g, _naive_level)


# ---------------------------------------------------------------------------
# Calibrated quantization
# ---------------------------------------------------------------------------


def _entry(table: CalibrationTable, tap: str):
    if tap not in table:
        raise MissingTapEntry(tap)
    return table[tap]


def _calibrated_level(table: CalibrationTable) -> LevelFn:
    def fn(level: _Level, in_loop: bool) -> None:
        for mm in _matmuls(level):
            m = mm.id
            tap = f"{level.path}{m}"
            ea, eb = _entry(table, f"{tap}:0"), _entry(table, f"{tap}:1")
            if not (ea.quantize and eb.quantize):
                continue  # sparse inputs stay in FP32
            a, b = mm.inputs
            consumers = level.uses((m, 0))
            sides = []
            for tag, src, target, e in (("a", a, DType.S8, ea), ("b", b, DType.U8, eb)):
                lo = level.const(f"{m}/t_min_{tag}", e.t_min)
                hi = level.const(f"{m}/t_max_{tag}", e.t_max)
                sides.append(level.add(f"{m}/quantize_{tag}", OpKind.QuantizeV2, [src, lo, hi], target=target.value))
            qa, qb = sides
            level.replace(
                m,
                OpKind.QuantizedMatMul,
                [(qa, 0), (qb, 0), (qa, 1), (qa, 2), (qb, 1), (qb, 2)],
                **_matmul_attrs(mm),
            )
            acc = [(m, 0), (m, 1), (m, 2)]
            direct = []
            for cid, pos in consumers:
                consumer = level.nodes[cid]
                gtap = f"{level.path}{cid}:0"
                if consumer.kind is OpKind.GatherNd and pos == 0 and gtap in table and table[gtap].quantize:
                    # Keep an 8-bit copy so the gather can move 1-byte elements.
                    e = table[gtap]
                    lo = level.const(f"{m}/t_min_out", e.t_min)
                    hi = level.const(f"{m}/t_max_out", e.t_max)
                    rq = level.add(f"{m}/requantize", OpKind.Requantize, acc + [lo, hi])
                    dq = level.add(f"{m}/dequantize_u8", OpKind.Dequantize, [(rq, 0), (rq, 1), (rq, 2)])
                    level.rewire({(cid, pos): (dq, 0)})
                else:
                    direct.append((cid, pos))
            if direct or (m, 0) in level.outputs:
                dq = level.add(f"{m}/dequantize", OpKind.Dequantize, acc)
                _redirect_output(level, (m, 0), (dq, 0), direct)
                level.hand_over(m, dq)

    return fn


def calibrated_quantize_pass(g: Graph, table: CalibrationTable) -> tuple[Graph, PassReport]:
    """Quantize MatMuls using calibrated Const thresholds.

    MatMuls with a Sparse input stay FP32.  Results feeding FP32 consumers
    are dequantized straight from S32; only edges into a quantizable
    GatherNd keep a Requantize.
    """
    return _run_pass("calibrated", g, _calibrated_level(table))


# ---------------------------------------------------------------------------
# GatherNd quantization
# ---------------------------------------------------------------------------


def _gathernd_level(level: _Level, in_loop: bool) -> None:
    if not in_loop:
        return
    for node in sorted(level.nodes.values(), key=lambda n: n.id):
        if node.kind is not OpKind.GatherNd:
            continue
        src, idx = node.inputs
        dq = level.nodes.get(src[0])
        if dq is None or dq.kind is not OpKind.Dequantize or src[1] != 0:
            continue
        q, q_min, q_max = dq.inputs
        if level.dtype(q) not in (DType.S8, DType.U8):
            continue
        gid = node.id
        consumers = level.uses((gid, 0))
        level.replace(gid, OpKind.QuantizedGatherNd, [q, idx, q_min, q_max])
        new_dq = level.add(f"{gid}/dequantize", OpKind.Dequantize, [(gid, 0), (gid, 1), (gid, 2)])
        _redirect_output(level, (gid, 0), (new_dq, 0), consumers)
        if not level.uses((dq.id, 0)) and (dq.id, 0) not in level.outputs:
            level.remove(dq.id)
        level.hand_over(gid, new_dq)


def quantize_gathernd_pass(g: Graph, table: CalibrationTable | None = None) -> tuple[Graph, PassReport]:
    """Move Dequantize below GatherNd inside loops so gathers copy 8-bit data."""
    return _run_pass("gathernd", g, _gathernd_level)


# ---------------------------------------------------------------------------
# Driver and equivalence check
# ---------------------------------------------------------------------------

PASSES = ("naive", "calibrated", "gathernd")


def run_passes(g: Graph, names: Sequence[str], table: CalibrationTable | None = None) -> tuple[Graph, list[PassReport]]:
    unknown = [n for n in names if n not in PASSES]
    if unknown:
        raise ValueError(f"unknown pass(es) {unknown}; choose from {list(PASSES)}")
    reports = []
    for name in names:
        if name == "naive":
            g, r = naive_quantize_pass(g)
        elif name == "calibrated":
            if table is None:
                raise ValueError("the calibrated pass needs a calibration table")
            g, r = calibrated_quantize_pass(g, table)
        else:
            g, r = quantize_gathernd_pass(g, table)
        reports.append(r)
    return g, reports


@dataclass(frozen=True)
class OutputDelta:
    max_abs: float
    rel_l2: float


@dataclass
class EquivalenceReport:
    deltas: dict[str, OutputDelta]
    tol: float

    @property
    def passed(self) -> bool:
        return all(d.rel_l2 <= self.tol for d in self.deltas.values())

    @property
    def worst_rel_l2(self) -> float:
        return max((d.rel_l2 for d in self.deltas.values()), default=0.0)

    def to_json(self) -> dict:
        return {
            "tol": self.tol,
            "passed": self.passed,
            "outputs": {k: {"max_abs": d.max_abs, "rel_l2": d.rel_l2} for k, d in self.deltas.items()},
        }


def rel_l2(ref: np.ndarray, got: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    diff = float(np.linalg.norm(np.asarray(got, dtype=np.float64) - ref))
    norm = float(np.linalg.norm(ref))
    if diff == 0.0:
        return 0.0
    return diff / norm if norm > 0 else float("inf")


def verify_equivalence(
    g1: Graph, g2: Graph, feeds: Sequence[Mapping[str, Tensor]], tol: float
) -> EquivalenceReport:
    """Run both graphs on ``feeds``; compare outputs pooled over all feeds."""
    if g1.output_names() != g2.output_names():
        raise ValueError(f"output names differ: {g1.output_names()} vs {g2.output_names()}")
    e1, e2 = Executor(g1), Executor(g2)
    pooled: dict[str, tuple[list, list]] = {name: ([], []) for name in g1.output_names()}
    for f in feeds:
        o1, o2 = e1.run(f), e2.run(f)
        for name in pooled:
            if o1[name].shape != o2[name].shape:
                raise ValueError(f"output {name!r} shape differs: {o1[name].shape} vs {o2[name].shape}")
            pooled[name][0].append(o1[name].data.astype(np.float64).ravel())
            pooled[name][1].append(o2[name].data.astype(np.float64).ravel())
    deltas = {}
    for name, (a, b) in pooled.items():
        ra = np.concatenate(a) if a else np.zeros(0)
        rb = np.concatenate(b) if b else np.zeros(0)
        max_abs = float(np.max(np.abs(ra - rb))) if ra.size else 0.0
        deltas[name] = OutputDelta(max_abs, rel_l2(ra, rb))
    return EquivalenceReport(deltas, tol)
