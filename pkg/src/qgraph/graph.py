"""Compute-graph data model: nodes, signatures, validation, JSON I/O."""

from __future__ import annotations

import enum
import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import CycleDetected, SchemaError
from .tensor import DType, Tensor

Ref = tuple[str, int]

SCHEMA_VERSION = 1


class OpKind(enum.Enum):
    Const = "Const"
    Placeholder = "Placeholder"
    MatMul = "MatMul"
    QuantizedMatMul = "QuantizedMatMul"
    QuantizeV2 = "QuantizeV2"
    Dequantize = "Dequantize"
    Requantize = "Requantize"
    RequantizationRange = "RequantizationRange"
    MinOp = "MinOp"
    MaxOp = "MaxOp"
    Softmax = "Softmax"
    LayerNorm = "LayerNorm"
    GatherNd = "GatherNd"
    QuantizedGatherNd = "QuantizedGatherNd"
    Add = "Add"
    Scale = "Scale"
    Concat = "Concat"
    OneHot = "OneHot"
    LoopRegion = "LoopRegion"


@dataclass(frozen=True)
class Node:
    id: str
    kind: OpKind
    inputs: tuple[Ref, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple((str(i), int(s)) for i, s in self.inputs))
        object.__setattr__(self, "attrs", dict(self.attrs))


@dataclass(frozen=True)
class Graph:
    name: str
    nodes: Mapping[str, Node]
    outputs: tuple[Ref, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", dict(self.nodes))
        object.__setattr__(self, "outputs", tuple((str(i), int(s)) for i, s in self.outputs))

    def consumers(self) -> dict[str, list[tuple[str, int]]]:
        """Map node id -> list of (consumer id, input position)."""
        out: dict[str, list[tuple[str, int]]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for pos, (src, _) in enumerate(node.inputs):
                if src in out:
                    out[src].append((node.id, pos))
        return out

    def output_names(self) -> list[str]:
        return [output_name(r) for r in self.outputs]

    def placeholders(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind is OpKind.Placeholder]


def output_name(ref: Ref) -> str:
    nid, slot = ref
    return nid if slot == 0 else f"{nid}:{slot}"


# ---------------------------------------------------------------------------
# Signature table
# ---------------------------------------------------------------------------

F = frozenset({DType.F32})
INT = frozenset({DType.S8, DType.U8, DType.S32})
INT8 = frozenset({DType.S8, DType.U8})
ANY = frozenset(DType)


@dataclass(frozen=True)
class Signature:
    inputs: tuple[frozenset, ...] | frozenset  # a bare frozenset means variadic
    attrs: tuple[str, ...]
    outputs: Callable[[Node, list[DType]], list[DType]]
    min_inputs: int = 0


def _fixed(*dts: DType):
    return lambda node, ins: list(dts)


SIGNATURES: dict[OpKind, Signature] = {
    OpKind.Const: Signature((), ("value",), lambda n, ins: [n.attrs["value"].dtype]),
    OpKind.Placeholder: Signature((), ("dtype",), lambda n, ins: [DType(n.attrs["dtype"])]),
    OpKind.MatMul: Signature((F, F), (), _fixed(DType.F32)),
    OpKind.QuantizedMatMul: Signature(
        (frozenset({DType.S8}), frozenset({DType.U8}), F, F, F, F), (),
        _fixed(DType.S32, DType.F32, DType.F32),
    ),
    OpKind.QuantizeV2: Signature(
        (F, F, F), ("target",), lambda n, ins: [DType(n.attrs["target"]), DType.F32, DType.F32]
    ),
    OpKind.Dequantize: Signature((INT, F, F), (), _fixed(DType.F32)),
    OpKind.Requantize: Signature(
        (frozenset({DType.S32}), F, F, F, F), (), _fixed(DType.U8, DType.F32, DType.F32)
    ),
    OpKind.RequantizationRange: Signature(
        (frozenset({DType.S32}), F, F), (), _fixed(DType.F32, DType.F32)
    ),
    OpKind.MinOp: Signature((F,), (), _fixed(DType.F32)),
    OpKind.MaxOp: Signature((F,), (), _fixed(DType.F32)),
    OpKind.Softmax: Signature((F,), (), _fixed(DType.F32)),
    OpKind.LayerNorm: Signature((F, F, F), (), _fixed(DType.F32)),
    OpKind.GatherNd: Signature((ANY, frozenset({DType.S32})), (), lambda n, ins: [ins[0]]),
    OpKind.QuantizedGatherNd: Signature(
        (INT8, frozenset({DType.S32}), F, F), (), lambda n, ins: [ins[0], DType.F32, DType.F32]
    ),
    OpKind.Add: Signature((F, F), (), _fixed(DType.F32)),
    OpKind.Scale: Signature((F,), ("factor",), _fixed(DType.F32)),
    OpKind.Concat: Signature(F, ("axis",), _fixed(DType.F32), min_inputs=1),
    OpKind.OneHot: Signature((frozenset({DType.S32}),), ("depth",), _fixed(DType.F32)),
    OpKind.LoopRegion: Signature(
        ANY, ("body", "steps", "carried", "sliced", "inputs"), lambda n, ins: _loop_output_dtypes(n)
    ),
}


def _loop_output_dtypes(node: Node) -> list[DType]:
    body: Graph = node.attrs["body"]
    dts = infer_dtypes(body)
    return [dts[src][slot] for src, slot in body.outputs]


def infer_dtypes(g: Graph) -> dict[str, list[DType]]:
    """Output dtypes of every node; raises on the first inconsistency."""
    out: dict[str, list[DType]] = {}
    for nid in topo_order(g):
        node = g.nodes[nid]
        ins = [out[src][slot] for src, slot in node.inputs]
        out[nid] = SIGNATURES[node.kind].outputs(node, ins)
    return out


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Issue:
    kind: str  # dtype | arity | dangling | cycle | attr | slot | loop
    node: str
    message: str


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __bool__(self) -> bool:
        return bool(self.issues)

    def __len__(self) -> int:
        return len(self.issues)

    def of_kind(self, kind: str) -> list[Issue]:
        return [i for i in self.issues if i.kind == kind]


def validate(g: Graph, prefix: str = "") -> ValidationReport:
    report = ValidationReport()
    add = lambda kind, nid, msg: report.issues.append(Issue(kind, prefix + nid, msg))

    structural_ok = set()
    for nid, node in g.nodes.items():
        if nid != node.id:
            add("attr", nid, f"node keyed as {nid!r} has id {node.id!r}")
        sig = SIGNATURES[node.kind]
        missing = [a for a in sig.attrs if a not in node.attrs]
        if missing:
            add("attr", nid, f"{node.kind.value} missing attrs {missing}")
            continue
        if isinstance(sig.inputs, frozenset):
            if len(node.inputs) < sig.min_inputs:
                add("arity", nid, f"{node.kind.value} needs at least {sig.min_inputs} inputs")
                continue
        elif len(node.inputs) != len(sig.inputs):
            add("arity", nid, f"{node.kind.value} takes {len(sig.inputs)} inputs, got {len(node.inputs)}")
            continue
        dangling = [src for src, _ in node.inputs if src not in g.nodes]
        for src in dangling:
            add("dangling", nid, f"input references missing node {src!r}")
        if not dangling:
            structural_ok.add(nid)
    for src, _ in g.outputs:
        if src not in g.nodes:
            add("dangling", "<outputs>", f"graph output references missing node {src!r}")

    try:
        order = topo_order(g, skip_missing=True)
    except CycleDetected as exc:
        add("cycle", "<graph>", str(exc))
        return report

    dtypes: dict[str, list[DType]] = {}
    for nid in order:
        node = g.nodes[nid]
        if nid not in structural_ok:
            continue
        sig = SIGNATURES[node.kind]
        ins: list[DType] = []
        bad = False
        for pos, (src, slot) in enumerate(node.inputs):
            if src not in dtypes:
                bad = True
                break
            if slot >= len(dtypes[src]):
                add("slot", nid, f"input {pos} reads slot {slot} of {src!r}, which has {len(dtypes[src])} outputs")
                bad = True
                continue
            dt = dtypes[src][slot]
            allowed = sig.inputs if isinstance(sig.inputs, frozenset) else sig.inputs[pos]
            if dt not in allowed:
                want = "|".join(sorted(d.value for d in allowed))
                add("dtype", nid, f"input {pos} of {node.kind.value} is {dt.value}, expected {want}")
            ins.append(dt)
        if bad:
            continue
        if node.kind is OpKind.LoopRegion:
            loop_issues = _validate_loop(node, ins, prefix)
            report.issues.extend(loop_issues)
            if loop_issues:
                continue
        elif node.kind is OpKind.Const and not isinstance(node.attrs["value"], Tensor):
            add("attr", nid, "Const value must be a Tensor")
            continue
        try:
            dtypes[nid] = sig.outputs(node, ins)
        except (ValueError, KeyError) as exc:
            add("attr", nid, f"bad attribute: {exc}")
    for src, slot in g.outputs:
        if src in dtypes and slot >= len(dtypes[src]):
            add("slot", "<outputs>", f"graph output reads slot {slot} of {src!r}")
    return report


def _validate_loop(node: Node, ins: list[DType], prefix: str) -> list[Issue]:
    issues: list[Issue] = []
    nid = prefix + node.id
    body = node.attrs["body"]
    if not isinstance(body, Graph):
        return [Issue("loop", nid, "body attr must be a Graph")]
    names = list(node.attrs["inputs"])
    carried, sliced, steps = node.attrs["carried"], node.attrs["sliced"], node.attrs["steps"]
    if len(names) != len(node.inputs):
        issues.append(Issue("arity", nid, f"{len(node.inputs)} inputs but {len(names)} body input names"))
    if carried + sliced > len(node.inputs) or carried < 0 or sliced < 0:
        issues.append(Issue("loop", nid, "carried + sliced exceeds the input count"))
    if not isinstance(steps, int) or steps < 0:
        issues.append(Issue("loop", nid, "steps must be a non-negative integer"))
    if len(body.outputs) < carried:
        issues.append(Issue("loop", nid, "body must output every carried value"))
    sub = validate(body, prefix=nid + "/")
    issues.extend(sub.issues)
    if issues:
        return issues
    for pos, name in enumerate(names):
        ph = body.nodes.get(name)
        if ph is None or ph.kind is not OpKind.Placeholder:
            issues.append(Issue("loop", nid, f"body input {name!r} is not a body Placeholder"))
        elif DType(ph.attrs["dtype"]) is not ins[pos]:
            issues.append(Issue("dtype", nid, f"loop input {pos} is {ins[pos].value}, body expects {ph.attrs['dtype']}"))
    if issues:
        return issues
    body_dts = infer_dtypes(body)
    for i in range(carried):
        src, slot = body.outputs[i]
        if body_dts[src][slot] is not ins[i]:
            issues.append(Issue("dtype", nid, f"carried value {i} changes dtype across iterations"))
    return issues


# ---------------------------------------------------------------------------
# Traversal
# ---------------------------------------------------------------------------


def topo_order(g: Graph, skip_missing: bool = False) -> list[str]:
    """Kahn's algorithm; ready nodes are released in lexicographic id order."""
    indeg = {nid: 0 for nid in g.nodes}
    succ: dict[str, list[str]] = {nid: [] for nid in g.nodes}
    for node in g.nodes.values():
        for src, _ in node.inputs:
            if src not in g.nodes:
                if skip_missing:
                    continue
                raise KeyError(f"node {node.id!r} references missing node {src!r}")
            indeg[node.id] += 1
            succ[src].append(node.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for nxt in succ[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(g.nodes):
        stuck = sorted(nid for nid, d in indeg.items() if d > 0)
        raise CycleDetected(f"cycle among nodes {stuck}")
    return order


def op_census(g: Graph) -> Counter:
    """Per-kind node counts, including LoopRegion bodies."""
    counts: Counter = Counter()
    for node in g.nodes.values():
        counts[node.kind] += 1
        if node.kind is OpKind.LoopRegion and isinstance(node.attrs.get("body"), Graph):
            counts.update(op_census(node.attrs["body"]))
    return counts


def census_json(c: Mapping[OpKind, int]) -> dict[str, int]:
    return {k.value: int(v) for k, v in sorted(c.items(), key=lambda kv: kv[0].value) if v}


def walk(g: Graph, prefix: str = "") -> Iterable[tuple[str, Node]]:
    """Yield (path, node) for every node, descending into loop bodies."""
    for nid, node in g.nodes.items():
        yield prefix + nid, node
        if node.kind is OpKind.LoopRegion and isinstance(node.attrs.get("body"), Graph):
            yield from walk(node.attrs["body"], prefix + nid + "/")


# ---------------------------------------------------------------------------
# JSON (schema v1)
# ---------------------------------------------------------------------------


def _attr_to_json(value: Any) -> Any:
    if isinstance(value, Tensor):
        return {"tensor": value.to_json()}
    if isinstance(value, Graph):
        return {"graph": graph_to_json(value)}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_attr_to_json(v) for v in value]
    return value


def graph_to_json(g: Graph) -> dict[str, Any]:
    return {
        "version": SCHEMA_VERSION,
        "name": g.name,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "inputs": [[src, slot] for src, slot in n.inputs],
                "attrs": {k: _attr_to_json(v) for k, v in n.attrs.items()},
            }
            for n in g.nodes.values()
        ],
        "outputs": [[src, slot] for src, slot in g.outputs],
    }


def save(g: Graph) -> bytes:
    return json.dumps(graph_to_json(g), sort_keys=False, separators=(",", ":")).encode()


def _ref_from_json(obj: Any, path: str) -> Ref:
    if (
        not isinstance(obj, list)
        or len(obj) != 2
        or not isinstance(obj[0], str)
        or not isinstance(obj[1], int)
        or isinstance(obj[1], bool)
    ):
        raise SchemaError(path, f"expected [id, slot], got {obj!r}")
    return obj[0], obj[1]


def _attr_from_json(value: Any, path: str) -> Any:
    if isinstance(value, dict):
        if set(value) == {"tensor"}:
            try:
                return Tensor.from_json(value["tensor"])
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(path + ".tensor", f"bad tensor literal: {exc}") from None
        if set(value) == {"graph"}:
            return graph_from_json(value["graph"], path + ".graph")
        raise SchemaError(path, "dict attrs must be {'tensor': ...} or {'graph': ...}")
    if isinstance(value, list):
        return [_attr_from_json(v, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def graph_from_json(obj: Any, path: str = "$") -> Graph:
    if not isinstance(obj, dict):
        raise SchemaError(path, "graph must be an object")
    for key in ("name", "nodes", "outputs"):
        if key not in obj:
            raise SchemaError(path, f"missing key {key!r}")
    if obj.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise SchemaError(path + ".version", f"unsupported version {obj['version']!r}")
    if not isinstance(obj["nodes"], list):
        raise SchemaError(path + ".nodes", "must be a list")
    nodes: dict[str, Node] = {}
    for i, raw in enumerate(obj["nodes"]):
        npath = f"{path}.nodes[{i}]"
        if not isinstance(raw, dict):
            raise SchemaError(npath, "node must be an object")
        for key in ("id", "kind"):
            if key not in raw:
                raise SchemaError(npath, f"missing key {key!r}")
        try:
            kind = OpKind(raw["kind"])
        except ValueError:
            raise SchemaError(npath + ".kind", f"unknown OpKind {raw['kind']!r}") from None
        nid = raw["id"]
        if not isinstance(nid, str):
            raise SchemaError(npath + ".id", "id must be a string")
        if nid in nodes:
            raise SchemaError(npath + ".id", f"duplicate id {nid!r}")
        inputs = raw.get("inputs", [])
        if not isinstance(inputs, list):
            raise SchemaError(npath + ".inputs", "must be a list")
        refs = [_ref_from_json(r, f"{npath}.inputs[{j}]") for j, r in enumerate(inputs)]
        attrs = raw.get("attrs", {})
        if not isinstance(attrs, dict):
            raise SchemaError(npath + ".attrs", "must be an object")
        attrs = {k: _attr_from_json(v, f"{npath}.attrs.{k}") for k, v in attrs.items()}
        nodes[nid] = Node(nid, kind, refs, attrs)
    if not isinstance(obj["outputs"], list):
        raise SchemaError(path + ".outputs", "must be a list")
    outputs = [_ref_from_json(r, f"{path}.outputs[{j}]") for j, r in enumerate(obj["outputs"])]
    name = obj["name"]
    if not isinstance(name, str):
        raise SchemaError(path + ".name", "must be a string")
    return Graph(name, nodes, outputs)


def load(data: bytes | str) -> Graph:
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return graph_from_json(obj)


# ---------------------------------------------------------------------------
# Construction helper
# ---------------------------------------------------------------------------


class GraphBuilder:
    """Incremental graph construction with unique, readable node ids."""

    def __init__(self, name: str):
        self.name = name
        self.nodes: dict[str, Node] = {}
        self.outputs: list[Ref] = []

    def _fresh(self, base: str) -> str:
        if base not in self.nodes:
            return base
        i = 1
        while f"{base}_{i}" in self.nodes:
            i += 1
        return f"{base}_{i}"

    def add(self, kind: OpKind, inputs: Sequence[Ref] = (), id: str | None = None, /, **attrs) -> Ref:
        nid = self._fresh(id or kind.value.lower())
        self.nodes[nid] = Node(nid, kind, tuple(inputs), attrs)
        return (nid, 0)

    def slot(self, ref: Ref, slot: int) -> Ref:
        return (ref[0], slot)

    def const(self, value: Tensor, id: str = "const") -> Ref:
        return self.add(OpKind.Const, (), id, value=value)

    def placeholder(self, id: str, dtype: DType) -> Ref:
        if id in self.nodes:
            raise ValueError(f"duplicate placeholder {id!r}")
        return self.add(OpKind.Placeholder, (), id, dtype=dtype.value)

    def output(self, *refs: Ref) -> None:
        self.outputs.extend(refs)

    def build(self) -> Graph:
        return Graph(self.name, dict(self.nodes), tuple(self.outputs))
