import threading

import numpy as np
import pytest

from fixtures import const_graph, counter_loop, gather_feeds, gather_loop, matmul_feeds, matmul_graph
from oracles import matmul_loop
from qgraph.errors import ExecutionError
from qgraph.executor import Executor, execute
from qgraph.graph import GraphBuilder, OpKind
from qgraph.kernels import bytes_moved
from qgraph.rewriter import naive_quantize_pass
from qgraph.tensor import DType, Tensor


def test_single_const():
    out = execute(const_graph((1.5, -2.0)), {})
    assert out == {"c": Tensor.f32([1.5, -2.0])}


def test_counter_loop_five_steps():
    out = execute(counter_loop(5), {"x0": Tensor.scalar(0.0)})
    assert out["loop"].item() == 5.0


def test_zero_step_loop_passes_carried_through():
    out = execute(counter_loop(0), {"x0": Tensor.scalar(3.0)})
    assert out["loop"].item() == 3.0


def test_naive_one_matmul_close_to_fp32():
    g = matmul_graph(1, shape=(16, 32, 8))
    q, _ = naive_quantize_pass(g)
    feeds = matmul_feeds(1, shape=(16, 32, 8), seed=4)
    want = np.array(matmul_loop(feeds["x0"].data.astype(float).tolist(), feeds["w0"].data.astype(float).tolist()))
    got = execute(q, feeds)["mm0"].data.astype(np.float64)
    rel = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel <= 2e-2


def test_kernel_error_carries_node_id():
    b = GraphBuilder("bad")
    x = b.placeholder("x", DType.F32)
    w = b.const(Tensor.f32(np.ones((5, 2))), "w")
    b.output(b.add(OpKind.MatMul, [x, w], "mm"))
    with pytest.raises(ExecutionError) as err:
        execute(b.build(), {"x": Tensor.f32(np.ones((2, 3)))})
    assert err.value.node_id == "mm"


def test_error_inside_loop_reports_body_path():
    g = gather_loop()
    feeds = gather_feeds()
    bad = dict(feeds, indices=Tensor.s32(np.full((3, 2, 1), 99)))
    with pytest.raises(ExecutionError) as err:
        execute(g, bad)
    assert err.value.node_id.startswith("loop/")


def test_missing_feed():
    with pytest.raises(ExecutionError):
        execute(counter_loop(), {})


def test_feed_dtype_checked():
    with pytest.raises(ExecutionError):
        execute(counter_loop(), {"x0": Tensor.s32(0)})


def test_invalid_graph_rejected():
    b = GraphBuilder("bad")
    b.add(OpKind.Softmax, [("nowhere", 0)], "s")
    with pytest.raises(ValueError):
        Executor(b.build())


def test_trace_records_gather_bytes():
    trace = []
    execute(gather_loop(steps=3, cols=4), gather_feeds(steps=3, cols=4), trace=trace)
    gathers = [r for r in trace if r["kind"] == "GatherNd"]
    assert len(gathers) == 3
    assert all(r["node"] == "loop/gather0" for r in gathers)
    # 2 rows x 4 cols of F32 per step
    assert bytes_moved(trace) == 3 * 2 * 4 * 4


def test_softmax_normalization_checked_under_trace():
    g = GraphBuilder("sm")
    x = g.placeholder("x", DType.F32)
    g.output(g.add(OpKind.Softmax, [x], "s", axis=-1))
    ex = Executor(g.build())
    trace = []
    out = ex.run({"x": Tensor.f32(np.random.default_rng(0).normal(size=(3, 5)))}, trace=trace)
    assert np.allclose(out["s"].data.sum(axis=-1), 1.0, atol=1e-6)


def test_observe_sees_tapped_edges():
    seen = {}
    ex = Executor(gather_loop())
    ex.run(gather_feeds(), observe=lambda tap, t: seen.setdefault(tap, []).append(t), taps={"loop/gather0:0"})
    assert list(seen) == ["loop/gather0:0"]
    assert len(seen["loop/gather0:0"]) == 3


def test_bit_deterministic_across_threads(toy):
    from qgraph.model import toy_feeds

    cfg, g = toy
    feeds = toy_feeds(cfg, 4, seed=2)
    ref = [execute(g, f)["decode:1"] for f in feeds]
    results = {}

    def work(i):
        ex = Executor(g, check=False)
        results[i] = [ex.run(f)["decode:1"] for f in feeds]

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for outs in results.values():
        assert outs == ref
