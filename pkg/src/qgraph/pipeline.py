"""Sentence batching and serial/parallel batch execution.

Each batch row (a sentence right-padded to the batch's longest sentence) is
one graph run, so outputs depend only on batch composition and never on
which worker ran the batch.
"""

from __future__ import annotations

import enum
import hashlib
import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import WorkerError
from .executor import Executor
from .graph import Graph
from .model import TOKENS
from .tensor import Tensor

PAD_ID = 0


@dataclass(frozen=True)
class Sentence:
    id: int
    tokens: tuple[int, ...]
    word_count: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError(f"sentence {self.id} has no tokens")
        if self.word_count < 1:
            raise ValueError(f"sentence {self.id} needs word_count >= 1")

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        return {"id": self.id, "tokens": list(self.tokens), "word_count": self.word_count}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Sentence":
        return cls(int(obj["id"]), tuple(obj["tokens"]), int(obj["word_count"]))


@dataclass(frozen=True)
class Batch:
    ids: tuple[int, ...]
    padded: np.ndarray  # (len(ids), max_len) int32, right-padded with PAD_ID
    real_tokens: int

    @property
    def max_len(self) -> int:
        return int(self.padded.shape[1]) if self.ids else 0

    @property
    def padded_tokens(self) -> int:
        return len(self.ids) * self.max_len

    @property
    def waste(self) -> int:
        return self.padded_tokens - self.real_tokens


class SortKey(enum.Enum):
    Tokens = "tokens"
    Words = "words"
    None_ = "none"


def sort_sentences(sentences: Sequence[Sentence], key: SortKey | str | None) -> list[Sentence]:
    """Stable descending sort by token or word count; ``None`` keeps input order."""
    key = SortKey.None_ if key is None else SortKey(key)
    if key is SortKey.None_:
        return list(sentences)
    attr = "token_count" if key is SortKey.Tokens else "word_count"
    return sorted(sentences, key=lambda s: -getattr(s, attr))


def make_batches(sentences: Sequence[Sentence], batch_size: int) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batches = []
    for i in range(0, len(sentences), batch_size):
        chunk = sentences[i : i + batch_size]
        width = max(s.token_count for s in chunk)
        padded = np.full((len(chunk), width), PAD_ID, dtype=np.int32)
        for row, s in enumerate(chunk):
            padded[row, : s.token_count] = s.tokens
        padded.setflags(write=False)
        batches.append(Batch(tuple(s.id for s in chunk), padded, sum(s.token_count for s in chunk)))
    return batches


def padding_totals(batches: Iterable[Batch]) -> tuple[int, int]:
    """(real, padded) token totals."""
    real = padded = 0
    for b in batches:
        real += b.real_tokens
        padded += b.padded_tokens
    return real, padded


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


def synthetic_corpus(
    n: int,
    seed: int = 0,
    vocab: int = 32,
    word_p: float = 0.15,
    piece_p: float = 0.6,
) -> list[Sentence]:
    """Geometric word counts; each word splits into a geometric number of
    subword tokens, so token and word orders disagree."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        words = int(rng.geometric(word_p))
        pieces = int(rng.geometric(piece_p, size=words).sum())
        out.append(Sentence(i, tuple(rng.integers(1, vocab, size=pieces).tolist()), words))
    return out


def save_corpus(sentences: Iterable[Sentence], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in sentences:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_corpus(path: str | Path) -> list[Sentence]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(Sentence.from_json(json.loads(line)))
    ids = [s.id for s in out]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate sentence ids")
    return out


def sample_calibration(sentences: Sequence[Sentence], n: int, seed: int) -> list[Sentence]:
    """Seeded uniform sample without replacement."""
    if n > len(sentences):
        raise ValueError(f"cannot sample {n} sentences from a corpus of {len(sentences)}")
    idx = np.random.default_rng(seed).choice(len(sentences), size=n, replace=False)
    return [sentences[i] for i in sorted(idx)]


def sentence_feed(tokens: Sequence[int]) -> dict[str, Tensor]:
    return {TOKENS: Tensor.s32(np.asarray(tokens, dtype=np.int32))}


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


class BatchQueue:
    """FIFO of batches; ``get`` returns ``None`` once closed and drained."""

    def __init__(self):
        self._items: deque[tuple[int, Batch]] = deque()
        self._cond = threading.Condition()
        self.closed = False

    def put(self, index: int, batch: Batch) -> None:
        with self._cond:
            if self.closed:
                raise RuntimeError("queue is closed")
            self._items.append((index, batch))
            self._cond.notify()

    def fill(self, batches: Sequence[Batch]) -> list[int]:
        """Enqueue in decreasing max token length (stable); returns the order."""
        order = sorted(range(len(batches)), key=lambda i: -batches[i].max_len)
        for i in order:
            self.put(i, batches[i])
        return order

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def get(self) -> tuple[int, Batch] | None:
        with self._cond:
            while not self._items and not self.closed:
                self._cond.wait()
            return self._items.popleft() if self._items else None

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


@dataclass(frozen=True)
class BatchRecord:
    batch_index: int
    worker: int
    sentences: int
    real_tokens: int
    padded_tokens: int
    seconds: float


@dataclass
class RunResult:
    outputs: dict[int, Tensor] = field(default_factory=dict)
    records: list[BatchRecord] = field(default_factory=list)
    workers: int = 1
    seconds: float = 0.0


def _run_batch(ex: Executor, batch: Batch, output: str) -> dict[int, Tensor]:
    return {sid: ex.run(sentence_feed(row))[output] for sid, row in zip(batch.ids, batch.padded)}


def _output_name(g: Graph, output: str | None) -> str:
    names = g.output_names()
    if output is None:
        if len(names) != 1:
            raise ValueError(f"graph has outputs {names}; pick one")
        return names[0]
    if output not in names:
        raise ValueError(f"graph has no output {output!r}")
    return output


def run_serial(g: Graph, batches: Sequence[Batch], output: str | None = None) -> RunResult:
    out = _output_name(g, output)
    ex = Executor(g)
    result = RunResult(workers=1)
    start = time.perf_counter()
    for i, batch in enumerate(batches):
        t0 = time.perf_counter()
        try:
            result.outputs.update(_run_batch(ex, batch, out))
        except Exception as exc:
            raise WorkerError(0, i, exc) from exc
        result.records.append(
            BatchRecord(i, 0, len(batch.ids), batch.real_tokens, batch.padded_tokens, time.perf_counter() - t0)
        )
    result.seconds = time.perf_counter() - start
    return result


def run_parallel(g: Graph, batches: Sequence[Batch], workers: int, output: str | None = None) -> RunResult:
    """``workers`` threads, each with its own executor, drain a shared FIFO."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    out = _output_name(g, output)
    Executor(g)  # validate once up front so every worker starts from a good graph
    queue = BatchQueue()
    queue.fill(batches)
    queue.close()
    stop = threading.Event()
    partial: list[dict[int, Tensor]] = [{} for _ in range(workers)]
    records: list[list[BatchRecord]] = [[] for _ in range(workers)]
    errors: list[WorkerError] = []
    lock = threading.Lock()

    def work(wid: int) -> None:
        ex = Executor(g, check=False)
        while not stop.is_set():
            item = queue.get()
            if item is None:
                return
            i, batch = item
            t0 = time.perf_counter()
            try:
                partial[wid].update(_run_batch(ex, batch, out))
            except Exception as exc:
                with lock:
                    errors.append(WorkerError(wid, i, exc))
                stop.set()
                return
            records[wid].append(
                BatchRecord(i, wid, len(batch.ids), batch.real_tokens, batch.padded_tokens, time.perf_counter() - t0)
            )

    start = time.perf_counter()
    threads = [threading.Thread(target=work, args=(w,), name=f"qgraph-worker-{w}") for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        err = min(errors, key=lambda e: e.batch_index)
        raise err from err.cause
    result = RunResult(workers=workers, seconds=time.perf_counter() - start)
    for part in partial:
        result.outputs.update(part)
    result.records = sorted((r for rs in records for r in rs), key=lambda r: r.batch_index)
    return result


def output_hash(outputs: Mapping[int, Tensor]) -> str:
    """sha256 over ids, dtypes, shapes and raw bytes in id order."""
    h = hashlib.sha256()
    for sid in sorted(outputs):
        t = outputs[sid]
        h.update(f"{sid}|{t.dtype.value}|{t.shape}|".encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def tensor_hash(t: Tensor) -> str:
    return output_hash({0: t})


def throughput_report(runs: Sequence[tuple[str, RunResult]]) -> list[dict]:
    """One row per labelled run."""
    rows = []
    for label, r in runs:
        real = sum(x.real_tokens for x in r.records)
        padded = sum(x.padded_tokens for x in r.records)
        n = sum(x.sentences for x in r.records)
        busy: dict[int, float] = {w: 0.0 for w in range(r.workers)}
        for x in r.records:
            busy[x.worker] += x.seconds
        rows.append(
            {
                "config": label,
                "workers": r.workers,
                "batches": len(r.records),
                "sentences": n,
                "seconds": r.seconds,
                "sentences_per_sec": n / r.seconds if r.seconds > 0 else 0.0,
                "real_tokens": real,
                "padded_tokens": padded,
                "padding_waste_pct": 100.0 * (padded - real) / padded if padded else 0.0,
                "padded_real_ratio": padded / real if real else 0.0,
                "worker_utilization": {
                    str(w): (b / r.seconds if r.seconds > 0 else 0.0) for w, b in sorted(busy.items())
                },
                "output_hash": output_hash(r.outputs),
            }
        )
    return rows
