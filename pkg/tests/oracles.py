"""Slow, independent reference implementations used as test oracles.

Everything here is written in plain Python (ints, Fractions, floats, loops)
so it shares no code path with the numpy implementations under test.
"""

from __future__ import annotations

import math
from fractions import Fraction


def round_half_away(x: Fraction) -> int:
    """Exact rounding of a rational, ties away from zero."""
    x = Fraction(x)
    sign = -1 if x < 0 else 1
    a = abs(x)
    whole = a.numerator // a.denominator
    if a - whole >= Fraction(1, 2):
        whole += 1
    return sign * whole


def quantize_scalar(x: float, zero_offset: float, scale: float, lo: int, hi: int) -> int:
    q = round_half_away((Fraction(x) - Fraction(zero_offset)) * Fraction(scale))
    return max(lo, min(hi, q))


def gemm_offset_loop(A, B, oa=0, ob=0, alpha=1, beta=0, C=None, oc=0):
    """C = alpha*((A+oa)(B+ob)) + beta*C + oc, one scalar at a time."""
    m, k, n = len(A), len(B), len(B[0]) if B else 0
    out = [[0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0
            for p in range(k):
                s += (int(A[i][p]) + oa) * (int(B[p][j]) + ob)
            v = alpha * s + oc
            if beta:
                v += beta * int(C[i][j])
            out[i][j] = v
    return out


def matmul_loop(A, B):
    m, k, n = len(A), len(B), len(B[0])
    return [[math.fsum(A[i][p] * B[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


def softmax_row(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = math.fsum(e)
    return [v / s for v in e]


def layer_norm_row(xs, gamma, beta, eps):
    n = len(xs)
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / n
    return [(x - mean) / math.sqrt(var + eps) * g + b for x, g, b in zip(xs, gamma, beta)]


def gather_nd_loop(params, indices):
    """params and indices as nested lists; index depth == len(last axis)."""

    def at(p, idx):
        for i in idx:
            p = p[i]
        return p

    def walk(ix):
        if ix and isinstance(ix[0], list) and ix[0] and isinstance(ix[0][0], list):
            return [walk(sub) for sub in ix]
        return [at(params, row) for row in ix]

    return walk(indices)


def kl(p, q, eps):
    sp, sq = math.fsum(p), math.fsum(q)
    p = [v / sp for v in p]
    q = [v / sq for v in q]
    if any(qi == 0 and pi > 0 for pi, qi in zip(p, q)):
        q = [eps if v == 0 else v for v in q]
        s = math.fsum(q)
        q = [v / s for v in q]
    return math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def sweep_kl(hist, i, levels, eps):
    """KL of the candidate that keeps the first ``i`` bins, or None if the
    candidate is skipped."""
    src = [float(v) for v in hist[:i]]
    last = ((levels - 1) * i) // levels
    if not any(v > 0 for v in src[:last]):
        return None
    p = list(src)
    p[-1] += float(sum(hist[i:]))
    q = [0.0] * i
    for j in range(levels):
        a, b = (j * i) // levels, ((j + 1) * i) // levels
        chunk = src[a:b]
        nz = sum(1 for v in chunk if v > 0)
        if nz:
            share = math.fsum(chunk) / nz
            for t in range(a, b):
                if src[t] > 0:
                    q[t] = share
    if not any(q):
        return None
    return kl(p, q, eps)


def sweep_best(hist, levels, start, eps):
    """(best i, best KL) scanning i = start..len(hist)."""
    best_i, best = len(hist), math.inf
    for i in range(max(start, levels), len(hist) + 1):
        v = sweep_kl(hist, i, levels, eps)
        if v is not None and v < best:
            best_i, best = i, v
    return best_i, best
