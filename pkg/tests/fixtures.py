"""Small hand-built graphs shared across test modules."""

import numpy as np

from qgraph.graph import GraphBuilder, OpKind
from qgraph.tensor import DType, Tensor


def const_graph(value=(1.0, 2.0)):
    b = GraphBuilder("const")
    b.output(b.const(Tensor.f32(list(value)), "c"))
    return b.build()


def matmul_graph(n_matmuls=1, consumer=None, shape=(4, 8, 3)):
    """``n_matmuls`` independent x_i @ w_i products, each optionally followed
    by ``consumer`` (an F32 unary OpKind such as Softmax)."""
    m, k, n = shape
    b = GraphBuilder(f"mm{n_matmuls}")
    for i in range(n_matmuls):
        x = b.placeholder(f"x{i}", DType.F32)
        w = b.placeholder(f"w{i}", DType.F32)
        y = b.add(OpKind.MatMul, [x, w], f"mm{i}")
        if consumer is not None:
            y = b.add(consumer, [y], f"out{i}")
        b.output(y)
    return b.build()


def matmul_feeds(n_matmuls=1, shape=(4, 8, 3), seed=0, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    m, k, n = shape
    feeds = {}
    for i in range(n_matmuls):
        feeds[f"x{i}"] = Tensor.f32(rng.uniform(lo, hi, (m, k)))
        feeds[f"w{i}"] = Tensor.f32(rng.uniform(lo, hi, (k, n)))
    return feeds


def counter_loop(steps=5):
    """x -> x + 1, ``steps`` times, starting from a fed x0."""
    body = GraphBuilder("body")
    x = body.placeholder("x", DType.F32)
    one = body.const(Tensor.scalar(1.0), "one")
    body.output(body.add(OpKind.Add, [x, one], "inc"))
    b = GraphBuilder("counter")
    x0 = b.placeholder("x0", DType.F32)
    loop = b.add(
        OpKind.LoopRegion, [x0], "loop",
        body=body.build(), steps=steps, carried=1, sliced=0, inputs=["x"],
    )
    b.output(loop)
    return b.build()


def gather_loop(steps=3, rows=6, cols=4, n_gathers=1, quantized_source=True):
    """A loop whose body gathers rows of a table.

    With ``quantized_source`` the table arrives as QuantizeV2 output and each
    gather reads it through a Dequantize; otherwise the gathers read an F32
    Const directly.
    """
    body = GraphBuilder("body")
    acc = body.placeholder("acc", DType.F32)
    idx = body.placeholder("idx", DType.S32)
    if quantized_source:
        q = body.placeholder("q", DType.U8)
        mn = body.placeholder("mn", DType.F32)
        mx = body.placeholder("mx", DType.F32)
    else:
        table = body.const(Tensor.f32(np.arange(rows * cols, dtype=np.float32).reshape(rows, cols) / 7), "table")
    for i in range(n_gathers):
        src = body.add(OpKind.Dequantize, [q, mn, mx], f"deq{i}") if quantized_source else table
        gathered = body.add(OpKind.GatherNd, [src, idx], f"gather{i}")
        acc = body.add(OpKind.Add, [acc, gathered], f"sum{i}")
    body.output(acc)

    b = GraphBuilder("gather_loop")
    acc0 = b.const(Tensor.f32(np.zeros((2, cols))), "acc0")
    idx = b.placeholder("indices", DType.S32)
    ins = [acc0, idx]
    names = ["acc", "idx"]
    if quantized_source:
        x = b.placeholder("table", DType.F32)
        lo = b.const(Tensor.scalar(-1.0), "lo")
        hi = b.const(Tensor.scalar(1.0), "hi")
        qt = b.add(OpKind.QuantizeV2, [x, lo, hi], "quant", target="U8")
        ins += [qt, b.slot(qt, 1), b.slot(qt, 2)]
        names += ["q", "mn", "mx"]
    loop = b.add(
        OpKind.LoopRegion, ins, "loop",
        body=body.build(), steps=steps, carried=1, sliced=1, inputs=names,
    )
    b.output(loop)
    return b.build()


def gather_feeds(steps=3, rows=6, cols=4, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "indices": Tensor.s32(rng.integers(0, rows, (steps, 2, 1))),
        "table": Tensor.f32(rng.uniform(-1, 1, (rows, cols))),
    }
