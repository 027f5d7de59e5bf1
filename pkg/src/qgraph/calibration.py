"""Activation histograms and KL-divergence threshold search.

Histograms span ``[-M, M]`` with ``M`` the largest observed magnitude, so
bin ``bins // 2`` starts exactly at zero and the two halves can be swept
independently.  The entropy sweep follows the usual TensorRT recipe:
for each candidate cut ``i`` the reference distribution is the first ``i``
bins with the clipped tail folded into the last one, and the candidate is
the unclipped slice merged to ``levels`` bins and spread back uniformly
over its occupied bins.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyHistogram, InsufficientMass, SupportMismatch, UnknownTap
from .executor import Executor
from .graph import Graph, OpKind, walk
from .tensor import Tensor

BINS = 2048
LEVELS = 128
START_BIN = 128
SMOOTHING_EPS = 1e-4
MIN_MASS = 256
ZERO_TOL = 1e-12


class DistributionClass(enum.Enum):
    Sparse = "Sparse"
    Narrow = "Narrow"
    Gaussian = "Gaussian"


class CalibrationMode(enum.Enum):
    Symmetric = "Symmetric"
    Independent = "Independent"
    Conjugate = "Conjugate"


@dataclass
class Histogram:
    lo: float
    hi: float
    counts: np.ndarray
    total: int = 0
    zero_count: int = 0
    observed_min: float = math.inf
    observed_max: float = -math.inf

    @classmethod
    def empty(cls, lo: float, hi: float, bins: int = BINS) -> "Histogram":
        if not lo < hi:
            raise ValueError("histogram needs lo < hi")
        return cls(float(lo), float(hi), np.zeros(bins, dtype=np.int64))

    @classmethod
    def of(cls, values, bins: int = BINS) -> "Histogram":
        """Histogram of ``values`` over their symmetric magnitude range."""
        x = np.asarray(values, dtype=np.float64).ravel()
        m = float(np.max(np.abs(x))) if x.size else 0.0
        h = cls.empty(-m, m, bins) if m > 0 else cls.empty(-1.0, 1.0, bins)
        h.add(x)
        return h

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.bins

    def add(self, values) -> None:
        x = np.asarray(values, dtype=np.float64).ravel()
        if not x.size:
            return
        counts, _ = np.histogram(x, bins=self.bins, range=(self.lo, self.hi))
        self.counts = self.counts + counts
        self.total += int(x.size)
        self.zero_count += int(np.count_nonzero(np.abs(x) <= ZERO_TOL))
        self.observed_min = min(self.observed_min, float(x.min()))
        self.observed_max = max(self.observed_max, float(x.max()))

    def merge(self, other: "Histogram") -> "Histogram":
        if (self.lo, self.hi, self.bins) != (other.lo, other.hi, other.bins):
            raise ValueError("cannot merge histograms with different bin edges")
        return Histogram(
            self.lo,
            self.hi,
            self.counts + other.counts,
            self.total + other.total,
            self.zero_count + other.zero_count,
            min(self.observed_min, other.observed_min),
            max(self.observed_max, other.observed_max),
        )


@dataclass(frozen=True)
class ThresholdPair:
    t_min: float
    t_max: float


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------


def default_taps(g: Graph) -> list[str]:
    """Every MatMul input edge and every GatherNd params edge."""
    taps = []
    for path, node in walk(g):
        if node.kind is OpKind.MatMul:
            taps += [f"{path}:0", f"{path}:1"]
        elif node.kind is OpKind.GatherNd:
            taps.append(f"{path}:0")
    return taps


EXACT_RANGE_SOURCES = frozenset({OpKind.Const, OpKind.Softmax})


def exact_range_taps(g: Graph, taps: Iterable[str]) -> set[str]:
    """Taps fed directly by a Const (weights) or a Softmax (probabilities)."""
    nodes = dict(walk(g))
    out = set()
    for tap in taps:
        path, _, pos = tap.rpartition(":")
        src = nodes[path].inputs[int(pos)][0]
        prefix = path[: len(path) - len(nodes[path].id)]
        if nodes[prefix + src].kind in EXACT_RANGE_SOURCES:
            out.add(tap)
    return out


def _check_taps(g: Graph, taps: Iterable[str]) -> None:
    nodes = dict(walk(g))
    for tap in taps:
        path, _, pos = tap.rpartition(":")
        node = nodes.get(path)
        if node is None or not pos.isdigit() or int(pos) >= len(node.inputs):
            raise UnknownTap(tap)


def collect_histograms(
    g: Graph,
    calib_set: Sequence[Mapping[str, Tensor]],
    taps: Sequence[str],
    bins: int = BINS,
) -> dict[str, Histogram]:
    """Two passes over ``calib_set``: global extrema first, then counts."""
    taps = list(taps)
    _check_taps(g, taps)
    ex = Executor(g)
    peak = {t: 0.0 for t in taps}

    def track(tap: str, t: Tensor) -> None:
        if t.size:
            peak[tap] = max(peak[tap], float(np.max(np.abs(t.data.astype(np.float64)))))

    for feeds in calib_set:
        ex.run(feeds, observe=track, taps=taps)

    hists = {t: Histogram.empty(-peak[t], peak[t], bins) if peak[t] > 0 else Histogram.empty(-1.0, 1.0, bins)
             for t in taps}

    def count(tap: str, t: Tensor) -> None:
        hists[tap].add(t.data)

    for feeds in calib_set:
        ex.run(feeds, observe=count, taps=taps)
    return hists


# ---------------------------------------------------------------------------
# Classification and search
# ---------------------------------------------------------------------------


def classify_distribution(
    h: Histogram, sparse_fraction: float = 0.90, narrow_occupancy: float = 0.05
) -> DistributionClass:
    if h.total <= 0:
        raise EmptyHistogram("cannot classify an empty histogram")
    if h.zero_count / h.total >= sparse_fraction:
        return DistributionClass.Sparse
    if np.count_nonzero(h.counts) / h.bins <= narrow_occupancy:
        return DistributionClass.Narrow
    return DistributionClass.Gaussian


def kl_divergence(p, q, eps: float = SMOOTHING_EPS) -> float:
    """KL(p || q) with 0*ln(0/q) = 0.

    If some bin has p > 0 but q == 0, every empty bin of q gets ``eps`` mass
    and q is renormalized.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise SupportMismatch(f"support sizes differ: {p.shape} vs {q.shape}")
    p = p / p.sum()
    q = q / q.sum()
    empty = q == 0
    if np.any(empty & (p > 0)):
        q = np.where(empty, eps, q)
        q = q / q.sum()
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def _expand_levels(src: np.ndarray, levels: int) -> np.ndarray:
    """Merge ``src`` into ``levels`` chunks, then spread each chunk's mass
    uniformly over that chunk's occupied bins."""
    n = len(src)
    starts = (np.arange(levels) * n) // levels
    sizes = np.diff(np.append(starts, n))
    occupied = src > 0
    sums = np.add.reduceat(src, starts)
    filled = np.add.reduceat(occupied.astype(np.float64), starts)
    per_bin = np.divide(sums, filled, out=np.zeros_like(sums), where=filled > 0)
    return np.repeat(per_bin, sizes) * occupied


def sweep_cut(hist: np.ndarray, levels: int = LEVELS, start: int = START_BIN, eps: float = SMOOTHING_EPS) -> int:
    """Number of leading bins whose clipping minimizes KL divergence."""
    hist = np.asarray(hist, dtype=np.float64)
    n = len(hist)
    start = min(max(start, levels), n)
    tail = np.concatenate([np.cumsum(hist[::-1])[::-1], [0.0]])
    occupied = np.flatnonzero(hist)
    first = int(occupied[0]) if occupied.size else n
    best_i, best_kl = n, math.inf
    for i in range(start, n + 1):
        if first >= ((levels - 1) * i) // levels:
            continue  # all kept mass in the top level: KL is trivially ~0
        src = hist[:i]
        p = src.copy()
        p[-1] += tail[i]
        q = _expand_levels(src, levels)
        if not q.any():
            continue
        kl = kl_divergence(p, q, eps)
        if kl < best_kl:
            best_i, best_kl = i, kl
    return best_i


def _halves(h: Histogram) -> tuple[np.ndarray, np.ndarray]:
    if h.lo != -h.hi or h.bins % 2:
        raise ValueError("threshold search needs an even bin count over [-M, M]")
    half = h.bins // 2
    return h.counts[:half][::-1], h.counts[half:]


def _side_cut(side: np.ndarray, nonzero: int, what: str, levels: int, start: int, eps: float) -> int:
    if nonzero < MIN_MASS:
        raise InsufficientMass(f"{what}: {nonzero} nonzero samples, need {MIN_MASS}")
    return sweep_cut(side, levels, start, eps)


def _f32(x: float) -> float:
    return float(np.float32(x))


def search_threshold(
    h: Histogram,
    mode: CalibrationMode,
    levels: int = LEVELS,
    start: int = START_BIN,
    eps: float = SMOOTHING_EPS,
    strict: bool = True,
) -> ThresholdPair:
    """KL-optimal thresholds for ``h`` under ``mode``.

    With ``strict=False`` a side lacking mass falls back to its observed
    extreme instead of raising :class:`InsufficientMass`.
    """
    mode = CalibrationMode(mode)
    neg, pos = _halves(h)
    w = h.bin_width
    n_neg = int(neg.sum())
    n_pos = max(0, int(pos.sum()) - h.zero_count)
    obs_neg = max(0.0, -h.observed_min) if h.total else 0.0
    obs_pos = max(0.0, h.observed_max) if h.total else 0.0

    if mode is CalibrationMode.Symmetric:
        try:
            t = _side_cut(neg + pos, n_neg + n_pos, "histogram", levels, start, eps) * w
        except InsufficientMass:
            if strict:
                raise
            t = max(obs_neg, obs_pos)
        t = _f32(t)
        return ThresholdPair(-t, t)

    cuts = []
    for side, nonzero, observed, what in ((neg, n_neg, obs_neg, "negative half"), (pos, n_pos, obs_pos, "positive half")):
        try:
            cuts.append(_side_cut(side, nonzero, what, levels, start, eps) * w)
        except InsufficientMass:
            if strict:
                raise
            cuts.append(observed)
    t_min, t_max = -_f32(cuts[0]), _f32(cuts[1])
    if mode is CalibrationMode.Independent:
        return ThresholdPair(t_min, t_max)
    t = max(abs(t_min), t_max)
    return ThresholdPair(-t, t)


def extreme_thresholds(h: Histogram, mode: CalibrationMode) -> ThresholdPair:
    """Thresholds at the observed extremes, shaped by ``mode``."""
    lo = _f32(min(h.observed_min, 0.0))
    hi = _f32(max(h.observed_max, 0.0))
    if CalibrationMode(mode) is CalibrationMode.Independent:
        return ThresholdPair(lo, hi)
    t = max(-lo, hi)
    return ThresholdPair(-t, t)


# ---------------------------------------------------------------------------
# Calibration table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TapEntry:
    cls: DistributionClass
    mode: CalibrationMode
    t_min: float | None
    t_max: float | None
    samples: int

    @property
    def quantize(self) -> bool:
        return self.cls is not DistributionClass.Sparse

    def to_json(self) -> dict:
        return {
            "class": self.cls.value,
            "mode": self.mode.value,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "quantize": self.quantize,
            "samples": self.samples,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "TapEntry":
        return cls(
            DistributionClass(obj["class"]),
            CalibrationMode(obj["mode"]),
            obj.get("t_min"),
            obj.get("t_max"),
            int(obj.get("samples", 0)),
        )


@dataclass
class CalibrationTable:
    taps: dict[str, TapEntry] = field(default_factory=dict)

    def __getitem__(self, tap: str) -> TapEntry:
        return self.taps[tap]

    def __contains__(self, tap: str) -> bool:
        return tap in self.taps

    def to_json(self) -> dict:
        return {"taps": {k: self.taps[k].to_json() for k in sorted(self.taps)}}

    def dumps(self) -> bytes:
        return (json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n").encode()

    @classmethod
    def from_json(cls, obj: Mapping) -> "CalibrationTable":
        return cls({k: TapEntry.from_json(v) for k, v in obj["taps"].items()})

    @classmethod
    def loads(cls, data: bytes | str) -> "CalibrationTable":
        return cls.from_json(json.loads(data))


def calibrate(
    g: Graph,
    calib_set: Sequence[Mapping[str, Tensor]],
    taps: Sequence[str] | None = None,
    mode: CalibrationMode = CalibrationMode.Symmetric,
    sparse_fraction: float = 0.90,
    narrow_occupancy: float = 0.05,
) -> CalibrationTable:
    mode = CalibrationMode(mode)
    taps = default_taps(g) if taps is None else list(taps)
    hists = collect_histograms(g, calib_set, taps)
    # Weights are exact and probabilities are bounded; clipping either
    # distorts every value that depends on it, so they keep their full range.
    exact = exact_range_taps(g, taps)
    table = CalibrationTable()
    for tap in taps:
        h = hists[tap]
        cls = classify_distribution(h, sparse_fraction, narrow_occupancy)
        if cls is DistributionClass.Sparse:
            table.taps[tap] = TapEntry(cls, mode, None, None, h.total)
            continue
        if tap in exact:
            pair = extreme_thresholds(h, mode)
        else:
            pair = search_threshold(h, mode, strict=False)
        table.taps[tap] = TapEntry(cls, mode, pair.t_min, pair.t_max, h.total)
    return table
