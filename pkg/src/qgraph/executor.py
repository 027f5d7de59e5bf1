"""Graph interpreter.

An :class:`Executor` binds one validated graph and evaluates it in
topological order.  It holds no per-run state, so a single instance (or
many instances over the same graph) can serve concurrent runs.
"""

from __future__ import annotations

import time
from typing import Callable, Collection, Mapping

import numpy as np

from . import kernels
from .errors import EmptyTensor, ExecutionError
from .graph import Graph, Node, OpKind, output_name, topo_order, validate
from .tensor import (
    DType,
    QuantParams,
    Tensor,
    compute_scale,
    dequantize,
    quantize,
    requantization_range,
    requantize,
    round_half_away,
)

Observer = Callable[[str, Tensor], None]

ACC_LIMIT = 2.0**31


def _f(t: Tensor) -> float:
    if t.size != 1:
        raise ValueError(f"expected a scalar range input, got shape {t.shape}")
    return float(t.data.reshape(-1)[0])


def _acc_scale(mn: Tensor, mx: Tensor) -> float:
    """Recover the S32 accumulator scale from its real-valued range."""
    return ACC_LIMIT / max(abs(_f(mn)), abs(_f(mx)))


def _signed_params(mn: float, mx: float) -> QuantParams:
    t = max(abs(mn), abs(mx))
    if t == 0.0:
        t = 1.0
    return compute_scale(-t, t, DType.S8)


def _unsigned_params(mn: float, mx: float) -> QuantParams:
    # Keep 0 inside the range so the GEMM offset for B stays within [-255, 0].
    lo, hi = min(mn, 0.0), max(mx, 0.0)
    if hi == lo:
        hi = lo + 1.0
    return compute_scale(lo, hi, DType.U8)


def params_for(dtype: DType, mn: float, mx: float) -> QuantParams:
    if dtype is DType.S8:
        return _signed_params(mn, mx)
    if dtype is DType.U8:
        return _unsigned_params(mn, mx)
    raise ValueError(f"no 8-bit params for {dtype}")


def _matmul_operands(node: Node, a: np.ndarray, b: np.ndarray):
    if node.attrs.get("transpose_a"):
        a = a.T
    if node.attrs.get("transpose_b"):
        b = b.T
    return a, b


def _op_matmul(node, ins, ctx):
    a, b = _matmul_operands(node, ins[0].data, ins[1].data)
    return [kernels.gemm_f32(Tensor(DType.F32, a), Tensor(DType.F32, b))]


def _op_quantized_matmul(node, ins, ctx):
    qa, qb, a_min, a_max, b_min, b_max = ins
    pa = _signed_params(_f(a_min), _f(a_max))
    pb = _unsigned_params(_f(b_min), _f(b_max))
    ob = int(round_half_away(pb.zero_offset * pb.scale))
    a, b = _matmul_operands(node, qa.data, qb.data)
    acc = kernels.gemm_s8u8s32(Tensor(DType.S8, a), Tensor(DType.U8, b), kernels.GemmOffsets(ob=ob))
    s = pa.scale * pb.scale
    return [acc, Tensor.scalar(-ACC_LIMIT / s), Tensor.scalar(ACC_LIMIT / s)]


def _op_quantize(node, ins, ctx):
    x, mn, mx = ins
    p = params_for(DType(node.attrs["target"]), _f(mn), _f(mx))
    return [quantize(x, p), Tensor.scalar(p.min), Tensor.scalar(p.max)]


def _op_dequantize(node, ins, ctx):
    q, mn, mx = ins
    if q.dtype is DType.S32:
        p = QuantParams.accumulator(_acc_scale(mn, mx))
    else:
        p = params_for(q.dtype, _f(mn), _f(mx))
    return [dequantize(q, p)]


def _op_requantization_range(node, ins, ctx):
    acc, mn, mx = ins
    lo, hi = requantization_range(acc, _acc_scale(mn, mx))
    if hi <= lo:
        # All-zero accumulator: any range containing 0 represents it exactly.
        hi = lo + 1.0
    return [Tensor.scalar(lo), Tensor.scalar(hi)]


def _op_requantize(node, ins, ctx):
    acc, mn, mx, out_min, out_max = ins
    lo, hi = min(_f(out_min), 0.0), max(_f(out_max), 0.0)
    q, p = requantize(acc, _acc_scale(mn, mx), lo, hi)
    return [q, Tensor.scalar(p.min), Tensor.scalar(p.max)]


def _op_min(node, ins, ctx):
    if ins[0].size == 0:
        raise EmptyTensor("MinOp of an empty tensor")
    return [Tensor.scalar(ins[0].data.min())]


def _op_max(node, ins, ctx):
    if ins[0].size == 0:
        raise EmptyTensor("MaxOp of an empty tensor")
    return [Tensor.scalar(ins[0].data.max())]


def _op_softmax(node, ins, ctx):
    axis = node.attrs.get("axis", -1)
    out = kernels.softmax(ins[0], axis)
    if ctx.trace is not None:
        sums = out.data.astype(np.float64).sum(axis=axis)
        if np.any(out.data < 0) or np.max(np.abs(sums - 1.0), initial=0.0) > 1e-6:
            raise ValueError("softmax output is not normalized")
    return [out]


def _op_layer_norm(node, ins, ctx):
    return [kernels.layer_norm(ins[0], ins[1], ins[2], node.attrs.get("eps", 1e-5))]


def _op_gather(node, ins, ctx):
    return [kernels.gather_nd(ins[0], ins[1])]


def _op_quantized_gather(node, ins, ctx):
    return [kernels.gather_nd(ins[0], ins[1]), ins[2], ins[3]]


def _op_add(node, ins, ctx):
    return [Tensor(DType.F32, ins[0].data + ins[1].data)]


def _op_scale(node, ins, ctx):
    return [Tensor(DType.F32, ins[0].data * np.float32(node.attrs["factor"]))]


def _op_concat(node, ins, ctx):
    return [Tensor(DType.F32, np.concatenate([t.data for t in ins], axis=node.attrs["axis"]))]


def _op_one_hot(node, ins, ctx):
    return [kernels.one_hot(ins[0], int(node.attrs["depth"]))]


def _op_loop(node, ins, ctx):
    return ctx.executor._run_loop(node, ins, ctx)


DISPATCH = {
    OpKind.MatMul: _op_matmul,
    OpKind.QuantizedMatMul: _op_quantized_matmul,
    OpKind.QuantizeV2: _op_quantize,
    OpKind.Dequantize: _op_dequantize,
    OpKind.Requantize: _op_requantize,
    OpKind.RequantizationRange: _op_requantization_range,
    OpKind.MinOp: _op_min,
    OpKind.MaxOp: _op_max,
    OpKind.Softmax: _op_softmax,
    OpKind.LayerNorm: _op_layer_norm,
    OpKind.GatherNd: _op_gather,
    OpKind.QuantizedGatherNd: _op_quantized_gather,
    OpKind.Add: _op_add,
    OpKind.Scale: _op_scale,
    OpKind.Concat: _op_concat,
    OpKind.OneHot: _op_one_hot,
    OpKind.LoopRegion: _op_loop,
}


class _RunContext:
    __slots__ = ("executor", "trace", "observe", "taps", "prefix")

    def __init__(self, executor, trace, observe, taps, prefix):
        self.executor = executor
        self.trace = trace
        self.observe = observe
        self.taps = taps
        self.prefix = prefix


class Executor:
    def __init__(self, graph: Graph, check: bool = True):
        if check:
            report = validate(graph)
            if report.issues:
                lines = "; ".join(f"{i.node}: {i.message}" for i in report.issues[:5])
                raise ValueError(f"graph {graph.name!r} does not validate: {lines}")
        self.graph = graph
        self.order = tuple(topo_order(graph))
        self._bodies = {
            nid: Executor(node.attrs["body"], check=False)
            for nid, node in graph.nodes.items()
            if node.kind is OpKind.LoopRegion
        }

    def run(
        self,
        feeds: Mapping[str, Tensor],
        trace: list | None = None,
        observe: Observer | None = None,
        taps: Collection[str] | None = None,
    ) -> dict[str, Tensor]:
        """Evaluate the graph.

        ``trace`` collects one record per executed node when given.
        ``observe(tap_id, tensor)`` sees every input edge named in ``taps``
        (``"node:pos"``, with ``"loop/"`` prefixes inside loop bodies).
        """
        ctx = _RunContext(self, trace, observe, frozenset(taps or ()), "")
        values = self._run(feeds, ctx)
        return {output_name(r): v for r, v in zip(self.graph.outputs, values)}

    def _run(self, feeds: Mapping[str, Tensor], ctx: _RunContext) -> list[Tensor]:
        env: dict[str, list[Tensor]] = {}
        for nid in self.order:
            node = self.graph.nodes[nid]
            path = ctx.prefix + nid
            ins = [env[src][slot] for src, slot in node.inputs]
            if ctx.observe is not None and ctx.taps:
                for pos, t in enumerate(ins):
                    tap = f"{path}:{pos}"
                    if tap in ctx.taps:
                        ctx.observe(tap, t)
            start = time.perf_counter() if ctx.trace is not None else 0.0
            try:
                if node.kind is OpKind.Const:
                    out = [node.attrs["value"]]
                elif node.kind is OpKind.Placeholder:
                    out = [self._feed(node, feeds)]
                else:
                    out = DISPATCH[node.kind](node, ins, ctx)
            except ExecutionError:
                raise
            except Exception as exc:
                raise ExecutionError(path, exc) from exc
            env[nid] = out
            if ctx.trace is not None and node.kind is not OpKind.LoopRegion:
                moved = out[0].nbytes if node.kind.value in kernels.GATHER_KINDS else 0
                ctx.trace.append(
                    {
                        "node": path,
                        "kind": node.kind.value,
                        "dtype": out[0].dtype.value,
                        "bytes": moved,
                        "seconds": time.perf_counter() - start,
                    }
                )
        return [env[src][slot] for src, slot in self.graph.outputs]

    @staticmethod
    def _feed(node: Node, feeds: Mapping[str, Tensor]) -> Tensor:
        if node.id not in feeds:
            raise KeyError(f"no feed for placeholder {node.id!r}")
        t = feeds[node.id]
        want = DType(node.attrs["dtype"])
        if t.dtype is not want:
            raise TypeError(f"feed {node.id!r} is {t.dtype.value}, expected {want.value}")
        return t

    def _run_loop(self, node: Node, ins: list[Tensor], ctx: _RunContext) -> list[Tensor]:
        body = self._bodies[node.id]
        names = list(node.attrs["inputs"])
        n_carried, n_sliced = node.attrs["carried"], node.attrs["sliced"]
        steps = node.attrs["steps"]
        axis = node.attrs.get("stack_axis", 0)
        carried = ins[:n_carried]
        sliced = ins[n_carried : n_carried + n_sliced]
        invariant = dict(zip(names[n_carried + n_sliced :], ins[n_carried + n_sliced :]))
        for t in sliced:
            if t.data.ndim == 0 or t.shape[0] < steps:
                raise ValueError(f"sliced input of shape {t.shape} shorter than {steps} steps")
        sub = _RunContext(body, ctx.trace, ctx.observe, ctx.taps, ctx.prefix + node.id + "/")
        per_step: list[list[np.ndarray]] = [[] for _ in range(len(body.graph.outputs) - n_carried)]
        extra_dtypes: list[DType] = []
        for step in range(steps):
            feeds = dict(invariant)
            feeds.update(zip(names[:n_carried], carried))
            for name, t in zip(names[n_carried : n_carried + n_sliced], sliced):
                feeds[name] = Tensor(t.dtype, t.data[step])
            outs = body._run(feeds, sub)
            carried = outs[:n_carried]
            extra_dtypes = [t.dtype for t in outs[n_carried:]]
            for acc, t in zip(per_step, outs[n_carried:]):
                acc.append(t.data)
        if steps == 0:
            stacked = [Tensor(DType.F32, np.zeros((0,), np.float32)) for _ in per_step]
        else:
            stacked = [Tensor(dt, np.stack(vals, axis=axis)) for dt, vals in zip(extra_dtypes, per_step)]
        return list(carried) + stacked


def execute(
    g: Graph,
    feeds: Mapping[str, Tensor],
    trace: list | None = None,
) -> dict[str, Tensor]:
    """One-shot convenience wrapper around :class:`Executor`."""
    return Executor(g).run(feeds, trace=trace)
