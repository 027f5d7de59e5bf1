"""Toy encoder-decoder transformer expressed as a qgraph Graph."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .graph import Graph, GraphBuilder, OpKind, Ref
from .tensor import DType, Tensor

TOKENS = "tokens"
OUTPUT = "decode:1"


@dataclass(frozen=True)
class ToyConfig:
    d_model: int = 16
    heads: int = 2
    layers: int = 2
    vocab: int = 32
    seq: int = 8
    decode_steps: int = 4
    beam: int = 2
    seed: int = 0
    weights: str = "gaussian"  # or "long_tailed"
    init_std: float = 0.02
    outlier_fraction: float = 0.001
    outlier_sigma: float = 10.0

    def __post_init__(self):
        for name in ("d_model", "heads", "layers", "vocab", "seq", "decode_steps", "beam"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.weights not in ("gaussian", "long_tailed"):
            raise ValueError(f"unknown weight preset {self.weights!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


class _Weights:
    def __init__(self, cfg: ToyConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def __call__(self, *shape: int) -> Tensor:
        cfg = self.cfg
        w = self.rng.normal(0.0, cfg.init_std, size=shape)
        if cfg.weights == "long_tailed":
            n = max(1, round(cfg.outlier_fraction * w.size))
            idx = self.rng.choice(w.size, size=n, replace=False)
            signs = self.rng.choice([-1.0, 1.0], size=n)
            w.flat[idx] = signs * cfg.outlier_sigma * cfg.init_std
        return Tensor(DType.F32, w)


def _attention(b: GraphBuilder, q: Ref, k: Ref, v: Ref, d_k: int, prefix: str) -> Ref:
    """softmax(q k^T / sqrt(d_k)) v"""
    s = b.add(OpKind.MatMul, [q, k], f"{prefix}score", transpose_b=True)
    s = b.add(OpKind.Scale, [s], f"{prefix}scale", factor=1.0 / math.sqrt(d_k))
    p = b.add(OpKind.Softmax, [s], f"{prefix}softmax", axis=-1)
    return b.add(OpKind.MatMul, [p, v], f"{prefix}context")


def _layer_norm(b: GraphBuilder, x: Ref, d: int, prefix: str) -> Ref:
    gamma = b.const(Tensor.f32(np.ones(d)), f"{prefix}gamma")
    beta = b.const(Tensor.f32(np.zeros(d)), f"{prefix}beta")
    return b.add(OpKind.LayerNorm, [x, gamma, beta], f"{prefix}ln", eps=1e-5)


def _encoder_layer(b: GraphBuilder, x: Ref, cfg: ToyConfig, w: _Weights, layer: int) -> Ref:
    d, dk = cfg.d_model, cfg.head_dim
    pre = f"enc{layer}/"
    heads = []
    for h in range(cfg.heads):
        hp = f"{pre}h{h}/"
        q = b.add(OpKind.MatMul, [x, b.const(w(d, dk), f"{hp}wq")], f"{hp}q")
        k = b.add(OpKind.MatMul, [x, b.const(w(d, dk), f"{hp}wk")], f"{hp}k")
        v = b.add(OpKind.MatMul, [x, b.const(w(d, dk), f"{hp}wv")], f"{hp}v")
        heads.append(_attention(b, q, k, v, dk, hp))
    cat = b.add(OpKind.Concat, heads, f"{pre}concat", axis=1)
    o = b.add(OpKind.MatMul, [cat, b.const(w(d, d), f"{pre}wo")], f"{pre}out")
    r = b.add(OpKind.Add, [x, o], f"{pre}residual")
    return _layer_norm(b, r, d, pre)


def _decoder_body(cfg: ToyConfig, w: _Weights) -> Graph:
    d = cfg.d_model
    b = GraphBuilder("decode_step")
    state = b.placeholder("state", DType.F32)
    idx = b.placeholder("beam_idx", DType.S32)
    mem = b.placeholder("memory", DType.F32)
    q = b.add(OpKind.MatMul, [state, b.const(w(d, d), "wq")], "q")
    ctx = _attention(b, q, mem, mem, d, "")
    h = _layer_norm(b, b.add(OpKind.Add, [state, ctx], "residual"), d, "")
    nxt = b.add(OpKind.MatMul, [h, b.const(w(d, d), "ws")], "next_state")
    logits = b.add(OpKind.MatMul, [h, b.const(w(d, cfg.vocab), "wv")], "logits")
    # Pseudo beam search: reorder hypotheses by this step's beam indices.
    reordered = b.add(OpKind.GatherNd, [nxt, idx], "reorder_state")
    new_state = _layer_norm(b, reordered, d, "state_")
    out = b.add(OpKind.GatherNd, [logits, idx], "reorder_logits")
    b.output(new_state, out)
    return b.build()


def build_toy_transformer(cfg: ToyConfig = ToyConfig()) -> Graph:
    """Encoder stack plus a fixed-length decode loop.

    Feed ``tokens`` (S32, shape ``(length,)``); the single output
    ``decode:1`` has shape ``(beam, decode_steps, vocab)``.
    """
    w = _Weights(cfg)
    b = GraphBuilder("toy_transformer")
    tokens = b.placeholder(TOKENS, DType.S32)
    onehot = b.add(OpKind.OneHot, [tokens], "onehot", depth=cfg.vocab)
    x = b.add(OpKind.MatMul, [onehot, b.const(w(cfg.vocab, cfg.d_model), "embedding")], "embed")
    for layer in range(cfg.layers):
        x = _encoder_layer(b, x, cfg, w, layer)

    body = _decoder_body(cfg, w)
    rng = np.random.default_rng(cfg.seed + 1)
    init = b.const(Tensor.f32(rng.normal(0.0, 1.0, (cfg.beam, cfg.d_model))), "init_state")
    beam_idx = b.const(
        Tensor.s32(rng.integers(0, cfg.beam, size=(cfg.decode_steps, cfg.beam, 1))), "beam_indices"
    )
    loop = b.add(
        OpKind.LoopRegion,
        [init, beam_idx, x],
        "decode",
        body=body,
        steps=cfg.decode_steps,
        carried=1,
        sliced=1,
        inputs=["state", "beam_idx", "memory"],
        stack_axis=1,
    )
    b.output(b.slot(loop, 1))
    return b.build()


def matmul_count(cfg: ToyConfig) -> int:
    """MatMuls emitted by :func:`build_toy_transformer` for ``cfg``."""
    return 1 + cfg.layers * (5 * cfg.heads + 1) + 5


def toy_feeds(cfg: ToyConfig, n: int, seed: int = 0, length: int | None = None) -> list[dict[str, Tensor]]:
    """Random token sequences (ids in [1, vocab), 0 is padding)."""
    rng = np.random.default_rng(seed)
    length = length or cfg.seq
    return [{TOKENS: Tensor.s32(rng.integers(1, cfg.vocab, size=length))} for _ in range(n)]
