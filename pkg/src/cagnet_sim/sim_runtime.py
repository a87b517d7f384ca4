"""In-process multi-rank runtime with metered collectives.

Ranks are Python callables executed either on OS threads (``"threads"``) or
as greenlets interleaved on one thread (``"round-robin"``). They meet only
inside collectives, which are rendezvous points: the last member to arrive
computes every member's output, so results never depend on arrival order.

Reductions fold payloads in ascending global-rank order, starting from a copy
of the lowest rank's payload.

Ledger conventions, per collective with ``g`` members and payload ``m`` words
(a dense block counts its entries, a sparse block its nonzeros):

* broadcast: the root sends ``g-1`` messages of ``m`` words; each other member
  receives one.
* all_reduce (ring): ``m`` is cut into ``g`` chunks whose sizes differ by at
  most one, the first ``m mod g`` chunks being larger. Member ``r`` (position
  in the group) sends ``2(m - |chunk_r|)`` words in ``2(g-1)`` messages and
  receives what its ring predecessor sends.
* reduce_scatter / all_gather (ring): member ``r`` sends ``M - |part_r|`` words
  in ``g-1`` messages, where ``M`` is the assembled size and ``part_r`` the
  slice it contributes or keeps; it receives its predecessor's amount.
* volume: every member of a collective is charged the payload size (``m`` for
  broadcasts and all-reduces, ``M`` for reduce-scatters and all-gathers). This
  is the per-participant view used by the analytical model.

Singleton groups are free and leave the ledger untouched.
"""

from __future__ import annotations

import copy
import threading
import zlib
from dataclasses import dataclass, field
from math import isqrt
from typing import Any, Callable, Sequence

import numpy as np

from .sparse_core import CsrMatrix

CATEGORIES = ("dbcast", "sbcast", "reduce", "allgather")
FIELDS = ("messages", "words", "recv_messages", "recv_words", "volume_words")
SCHEDULERS = ("threads", "round-robin")


class CollectiveMismatchError(RuntimeError):
    """Members of a group called different collectives at the same sequence point."""


class DeadlockError(RuntimeError):
    """Every live rank is blocked in a collective that can never complete."""


class GridError(ValueError):
    pass


def icbrt(p: int) -> int:
    s = round(p ** (1.0 / 3.0))
    for cand in (s - 1, s, s + 1):
        if cand >= 0 and cand**3 == p:
            return cand
    return -1


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class ProcessGrid:
    """Rank topology.

    Rank numbering is row-major over ``dims``:

    * ``1d``: ``dims = (P,)``; row groups are singletons, the column group is
      the whole world.
    * ``1.5d``: ``dims = (P/c, c)``; rank ``(i, j) = i*c + j``.
    * ``2d``: ``dims = (P_r, P_c)``; rank ``(i, j) = i*P_c + j``.
    * ``3d``: ``dims = (s, s, s)``; rank ``(i, j, k) = (i*s + j)*s + k``. The
      row group of ``(i, j, k)`` is ``(i, *, k)``, its column group
      ``(*, j, k)``, its fiber ``(i, j, *)`` and its plane ``(*, j, *)``.
    """

    kind: str
    dims: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def replication(self) -> int:
        return self.dims[1] if self.kind == "1.5d" else 1

    def coords(self, rank: int) -> tuple[int, ...]:
        return tuple(int(x) for x in np.unravel_index(rank, self.dims))

    def rank_of(self, *coords: int) -> int:
        return int(np.ravel_multi_index(coords, self.dims))

    def group(self, rank: int, name: str) -> tuple[int, ...]:
        c = self.coords(rank)
        if name == "world":
            return tuple(range(self.size))
        if self.kind == "1d":
            if name == "row":
                return (rank,)
            if name == "col":
                return tuple(range(self.size))
        elif self.kind in ("1.5d", "2d"):
            i, j = c
            if name == "row":
                return tuple(self.rank_of(i, jj) for jj in range(self.dims[1]))
            if name == "col":
                return tuple(self.rank_of(ii, j) for ii in range(self.dims[0]))
        elif self.kind == "3d":
            i, j, k = c
            s = self.dims[0]
            if name == "row":
                return tuple(self.rank_of(i, jj, k) for jj in range(s))
            if name == "col":
                return tuple(self.rank_of(ii, j, k) for ii in range(s))
            if name == "fiber":
                return tuple(self.rank_of(i, j, kk) for kk in range(s))
            if name == "plane":
                return tuple(sorted(self.rank_of(ii, j, kk) for ii in range(s) for kk in range(s)))
        raise GridError(f"{self.kind} grids have no '{name}' group")

    def group_names(self) -> tuple[str, ...]:
        return ("row", "col", "fiber", "plane") if self.kind == "3d" else ("row", "col")

    def all_groups(self, name: str) -> list[tuple[int, ...]]:
        return sorted({self.group(r, name) for r in range(self.size)})

    def describe(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "ranks": self.size}


def make_grid(kind: str, P: int, c: int | None = None, rows: int | None = None, cols: int | None = None) -> ProcessGrid:
    """Build a grid; ``rows``/``cols`` request a rectangular 2D grid."""
    if P < 1:
        raise GridError(f"P must be at least 1, got {P}")
    if kind == "1d":
        return ProcessGrid("1d", (P,))
    if kind == "1.5d":
        c = 1 if c is None else c
        if c < 1 or P % c:
            raise GridError(f"1.5D needs a replication factor c >= 1 dividing P; got P={P}, c={c}")
        return ProcessGrid("1.5d", (P // c, c))
    if kind == "2d":
        if rows is not None or cols is not None:
            if rows is None or cols is None or rows * cols != P:
                raise GridError(f"a rectangular 2D grid needs rows*cols == P; got {rows}x{cols} for P={P}")
            return ProcessGrid("2d", (rows, cols))
        g = isqrt(P)
        if g * g != P:
            raise GridError(f"square 2D needs P to be a perfect square, got P={P}")
        return ProcessGrid("2d", (g, g))
    if kind == "3d":
        s = icbrt(P)
        if s < 1:
            raise GridError(f"3D needs P to be a perfect cube, got P={P}")
        return ProcessGrid("3d", (s, s, s))
    raise GridError(f"unknown grid kind {kind!r}")


# ---------------------------------------------------------------- ledger


class CommLedger:
    """Per-rank, per-category counters. All updates happen under the runtime lock."""

    def __init__(self, n_ranks: int):
        self.n_ranks = n_ranks
        self.counts = np.zeros((n_ranks, len(CATEGORIES), len(FIELDS)), dtype=np.int64)

    def add(self, rank: int, category: str, **amounts: int) -> None:
        ci = CATEGORIES.index(category)
        for name, value in amounts.items():
            if value < 0:
                raise ValueError("ledger counters only increase")
            self.counts[rank, ci, FIELDS.index(name)] += value

    def get(self, rank: int, category: str, name: str) -> int:
        return int(self.counts[rank, CATEGORIES.index(category), FIELDS.index(name)])

    def per_rank(self, category: str, name: str) -> list[int]:
        return [int(x) for x in self.counts[:, CATEGORIES.index(category), FIELDS.index(name)]]

    def snapshot(self) -> "CommLedger":
        out = CommLedger(self.n_ranks)
        out.counts = self.counts.copy()
        return out

    def delta(self, earlier: "CommLedger") -> "CommLedger":
        out = CommLedger(self.n_ranks)
        out.counts = self.counts - earlier.counts
        return out

    def __add__(self, other: "CommLedger") -> "CommLedger":
        out = CommLedger(self.n_ranks)
        out.counts = self.counts + other.counts
        return out

    def total_words(self) -> int:
        return int(self.counts[:, :, FIELDS.index("words")].sum())


LEDGER_CONVENTIONS = {
    "broadcast": "root sends m words to each of g-1 members",
    "all_reduce": "ring; member r sends 2(m - |chunk_r|) words in 2(g-1) messages",
    "reduce_scatter": "ring; member r sends M - |part_r| words in g-1 messages",
    "all_gather": "ring; member r sends M - |part_r| words in g-1 messages",
    "volume_words": "payload size charged to every member of a collective",
    "sparse_words": "one word per stored nonzero",
    "singleton_groups": "free",
}


def ledger_report(ledger: CommLedger, grid: ProcessGrid) -> dict:
    per_category = {}
    per_rank = {}
    for cat in CATEGORIES:
        per_category[cat] = {name: int(sum(ledger.per_rank(cat, name))) for name in FIELDS}
        per_rank[cat] = {name: ledger.per_rank(cat, name) for name in FIELDS}
    sent_words = ledger.counts[:, :, FIELDS.index("words")]
    sent_msgs = ledger.counts[:, :, FIELDS.index("messages")]
    return {
        "grid": grid.describe(),
        "per_category": per_category,
        "per_rank": per_rank,
        "per_rank_max_words": {cat: int(sent_words[:, i].max()) for i, cat in enumerate(CATEGORIES)},
        "world_totals": {"messages": int(sent_msgs.sum()), "words": int(sent_words.sum())},
        "conventions": dict(LEDGER_CONVENTIONS),
    }


# ---------------------------------------------------------------- buffers


class BufferMeter:
    """Tallies buffer sizes that ranks report, summed across ranks per call.

    The ``n``-th ``record_buffer(label, ...)`` call on every rank forms one
    aggregate; ``peak(label)`` is the largest aggregate.
    """

    def __init__(self):
        self._calls: dict[tuple[int, str], int] = {}
        self._totals: dict[str, dict[int, int]] = {}

    def record(self, rank: int, label: str, words: int) -> None:
        idx = self._calls.get((rank, label), 0)
        self._calls[(rank, label)] = idx + 1
        bucket = self._totals.setdefault(label, {})
        bucket[idx] = bucket.get(idx, 0) + int(words)

    def totals(self, label: str) -> list[int]:
        bucket = self._totals.get(label, {})
        return [bucket[i] for i in sorted(bucket)]

    def peak(self, label: str) -> int:
        return max(self.totals(label), default=0)

    def labels(self) -> list[str]:
        return sorted(self._totals)


# ---------------------------------------------------------------- faults


@dataclass
class FaultSpec:
    """Perturb the output one rank receives from the first collective with ``tag``."""

    rank: int
    tag: str
    delta: float = 1e-3
    fired: bool = False


# ---------------------------------------------------------------- collectives


def payload_words(x) -> int:
    if isinstance(x, CsrMatrix):
        return x.nnz
    if isinstance(x, np.ndarray):
        return int(x.size)
    if np.isscalar(x):
        return 1
    raise TypeError(f"unsupported payload type {type(x).__name__}")


def _clone(x):
    if isinstance(x, np.ndarray):
        return x.copy()
    if isinstance(x, (CsrMatrix, float, int)):
        return x
    return copy.deepcopy(x)


def ring_chunks(m: int, g: int) -> list[int]:
    base, extra = divmod(m, g)
    return [base + (1 if r < extra else 0) for r in range(g)]


@dataclass
class _Op:
    group: tuple[int, ...]
    seq: int
    signature: tuple
    payloads: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    complete: bool = False
    error: Exception | None = None


class RankContext:
    """Handle a rank uses to talk to its peers."""

    def __init__(self, runtime: "Runtime", rank: int):
        self.runtime = runtime
        self.rank = rank
        self.grid = runtime.grid
        self._seq: dict[tuple[int, ...], int] = {}
        self._crc: dict[tuple[int, ...], int] = {}

    @property
    def coords(self) -> tuple[int, ...]:
        return self.grid.coords(self.rank)

    def group(self, name: str) -> tuple[int, ...]:
        return self.grid.group(self.rank, name)

    def record_buffer(self, label: str, words: int) -> None:
        with self.runtime._lock:
            self.runtime.meter.record(self.rank, label, words)

    # Each collective takes an explicit group (tuple of global ranks).

    def broadcast(self, group, root: int, payload, category: str = "dbcast", tag: str = ""):
        group = self._check_group(group)
        if root not in group:
            raise ValueError(f"broadcast root {root} is not in group {group}")
        if category not in ("dbcast", "sbcast"):
            raise ValueError(f"broadcast category must be dbcast or sbcast, got {category!r}")
        data = payload if self.rank == root else None
        return self._collective("broadcast", group, (root, category, tag), data)

    def all_reduce(self, group, payload, category: str = "reduce", tag: str = ""):
        group = self._check_group(group)
        return self._collective("all_reduce", group, (None, category, tag), payload)

    def reduce_scatter(self, group, payload, partition: Sequence[tuple[int, int]], category: str = "reduce", tag: str = ""):
        """Sum ``payload`` over ``group`` and keep rows ``partition[position]``."""
        group = self._check_group(group)
        part = tuple((int(a), int(b)) for a, b in partition)
        if len(part) != len(group):
            raise ValueError(f"partition has {len(part)} ranges for a group of {len(group)}")
        rows = np.asarray(payload).shape[0]
        pos = 0
        for a, b in part:
            if a != pos or b < a:
                raise ValueError(f"partition {part} is not a disjoint ordered cover of {rows} rows")
            pos = b
        if pos != rows:
            raise ValueError(f"partition {part} is not a disjoint ordered cover of {rows} rows")
        return self._collective("reduce_scatter", group, (part, category, tag), payload)

    def all_gather(self, group, piece, axis: int = 0, category: str = "allgather", tag: str = ""):
        """Concatenate ``piece`` from every member in group order along ``axis``."""
        group = self._check_group(group)
        if axis not in (0, 1):
            raise ValueError("axis must be 0 or 1")
        return self._collective("all_gather", group, (axis, category, tag), piece)

    # internals

    def _check_group(self, group) -> tuple[int, ...]:
        group = tuple(sorted(int(r) for r in group))
        if len(set(group)) != len(group):
            raise ValueError(f"group {group} repeats a rank")
        if self.rank not in group:
            raise ValueError(f"rank {self.rank} is not a member of group {group}")
        if group[0] < 0 or group[-1] >= self.grid.size:
            raise ValueError(f"group {group} names ranks outside the grid")
        return group

    def _collective(self, kind: str, group, params: tuple, payload):
        if params[1] not in CATEGORIES:
            raise ValueError(f"unknown ledger category {params[1]!r}")
        rt = self.runtime
        if len(group) == 1:
            return rt._finish_output(self.rank, params[2], _local_result(kind, params, payload))
        seq = self._seq.get(group, 0)
        self._seq[group] = seq + 1
        crc = zlib.crc32(repr((kind, params)).encode(), self._crc.get(group, 0))
        self._crc[group] = crc
        signature = (kind, params, crc)
        op = rt._arrive(self.rank, group, seq, signature, payload)
        rt._scheduler.wait(self.rank, op)
        if op.error is not None:
            raise op.error
        return op.outputs.pop(self.rank)


def _local_result(kind: str, params: tuple, payload):
    if kind == "reduce_scatter":
        (a, b), = params[0]
        return _clone(payload)[a:b]
    return _clone(payload)


# ---------------------------------------------------------------- schedulers


class _ThreadScheduler:
    def __init__(self, runtime: "Runtime"):
        self.rt = runtime

    def run(self, bodies: list[Callable[[], Any]]) -> None:
        threads = [threading.Thread(target=body, name=f"rank-{r}", daemon=True) for r, body in enumerate(bodies)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def wait(self, rank: int, op: _Op) -> None:
        rt = self.rt
        with rt._cond:
            rt._waiting[rank] = op
            try:
                while not op.complete:
                    if rt._stalled():
                        rt._deadlock = True
                        rt._cond.notify_all()
                    if rt._deadlock:
                        raise DeadlockError(rt._deadlock_message())
                    rt._cond.wait(timeout=1.0)
            finally:
                rt._waiting[rank] = None

    def after_arrival(self, rank: int) -> None:
        pass


class _RoundRobinScheduler:
    """Greenlet ranks on a single OS thread, switched in ascending rank order."""

    def __init__(self, runtime: "Runtime"):
        self.rt = runtime
        self.hub = None

    def run(self, bodies: list[Callable[[], Any]]) -> None:
        from greenlet import greenlet

        rt = self.rt
        self.hub = greenlet.getcurrent()
        lets = [greenlet(body) for body in bodies]
        while not all(rt._done):
            progressed = False
            for r, g in enumerate(lets):
                if rt._done[r]:
                    continue
                op = rt._waiting[r]
                if op is None or op.complete or rt._deadlock:
                    g.switch()
                    progressed = True
            if not progressed:
                rt._deadlock = True

    def wait(self, rank: int, op: _Op) -> None:
        rt = self.rt
        rt._waiting[rank] = op
        try:
            while not op.complete:
                if rt._deadlock:
                    raise DeadlockError(rt._deadlock_message())
                self.hub.switch()
        finally:
            rt._waiting[rank] = None

    def after_arrival(self, rank: int) -> None:
        # yield at every collective so ranks interleave even when nothing blocks
        self.rt._waiting[rank] = None
        self.hub.switch()


# ---------------------------------------------------------------- runtime


class Runtime:
    """Owns the grid, ledger, buffer meter and scheduler.

    ``run(fn, states)`` executes ``fn(ctx, states[rank])`` on every rank and
    returns the per-rank results. The ledger and meter persist across runs.
    """

    def __init__(self, grid: ProcessGrid, scheduler: str = "threads", fault: FaultSpec | None = None):
        if scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}, got {scheduler!r}")
        self.grid = grid
        self.scheduler = scheduler
        self.ledger = CommLedger(grid.size)
        self.tag_ledgers: dict[str, CommLedger] = {}
        self.meter = BufferMeter()
        self.events: list[dict] = []
        self.fault = fault
        self._cond = threading.Condition()
        self._lock = self._cond
        self._scheduler = _ThreadScheduler(self) if scheduler == "threads" else _RoundRobinScheduler(self)

    def run(self, fn: Callable[[RankContext, Any], Any], states: Sequence[Any] | None = None) -> list:
        P = self.grid.size
        states = [None] * P if states is None else list(states)
        if len(states) != P:
            raise ValueError(f"need one state per rank ({P}), got {len(states)}")
        self._ops: dict[tuple, _Op] = {}
        self._waiting: list[_Op | None] = [None] * P
        self._done = [False] * P
        self._deadlock = False
        results: list = [None] * P
        errors: list = [None] * P
        contexts = [RankContext(self, r) for r in range(P)]

        def body_for(r: int):
            def body():
                try:
                    results[r] = fn(contexts[r], states[r])
                except BaseException as exc:  # reported after every rank stops
                    errors[r] = exc
                finally:
                    with self._cond:
                        self._done[r] = True
                        if self._stalled():
                            self._deadlock = True
                        self._cond.notify_all()

            return body

        self._scheduler.run([body_for(r) for r in range(P)])
        primary = [e for e in errors if e is not None and not isinstance(e, DeadlockError)]
        if primary:
            raise primary[0]
        if any(e is not None for e in errors):
            raise next(e for e in errors if e is not None)
        self.events.sort(key=lambda e: (e["group"], e["seq"]))
        return results

    # called with the lock held
    def _stalled(self) -> bool:
        live = [r for r in range(self.grid.size) if not self._done[r]]
        if not live:
            return False
        return all(self._waiting[r] is not None and not self._waiting[r].complete for r in live)

    def _deadlock_message(self) -> str:
        blocked = {r: (op.group, op.seq, op.signature[0]) for r, op in enumerate(self._waiting) if op is not None and not op.complete}
        return f"collective deadlock; blocked ranks: {blocked}"

    def _arrive(self, rank: int, group, seq: int, signature: tuple, payload) -> _Op:
        with self._cond:
            key = (group, seq)
            op = self._ops.get(key)
            if op is None:
                op = self._ops[key] = _Op(group, seq, signature)
            elif op.signature != signature:
                op.error = CollectiveMismatchError(
                    f"group {group} step {seq}: rank {rank} called {signature[0]}{signature[1]} "
                    f"but another member called {op.signature[0]}{op.signature[1]}"
                )
                op.complete = True
                self._cond.notify_all()
                raise op.error
            op.payloads[rank] = payload
            if len(op.payloads) == len(group) and op.error is None:
                try:
                    self._complete(op)
                except (ValueError, TypeError) as exc:
                    op.error = CollectiveMismatchError(f"group {group} step {seq}: {exc}")
                op.complete = True
                self._cond.notify_all()
        self._scheduler.after_arrival(rank)
        return op

    def _finish_output(self, rank: int, tag: str, value):
        f = self.fault
        if f is not None and not f.fired and f.rank == rank and f.tag == tag:
            if isinstance(value, np.ndarray) and value.size:
                value = value.copy()
                value.flat[0] += f.delta
            elif isinstance(value, float):
                value += f.delta
            f.fired = True
        return value

    def _complete(self, op: _Op) -> None:
        kind, params, _ = op.signature
        category, tag = params[1], params[2]
        g = len(op.group)
        tagged = self.tag_ledgers.setdefault(tag, CommLedger(self.grid.size))


        def charge(rank, cat, **amounts):
            self.ledger.add(rank, cat, **amounts)
            tagged.add(rank, cat, **amounts)

        if kind == "broadcast":
            root = params[0]
            data = op.payloads[root]
            m = payload_words(data)
            for r in op.group:
                op.outputs[r] = self._finish_output(r, tag, _clone(data))
                charge(r, category, volume_words=m)
                if r == root:
                    charge(r, category, messages=g - 1, words=m * (g - 1))
                else:
                    charge(r, category, recv_messages=1, recv_words=m)
        elif kind in ("all_reduce", "reduce_scatter"):
            arrays = [np.asarray(op.payloads[r], dtype=np.float64) for r in op.group]
            shapes = {a.shape for a in arrays}
            if len(shapes) != 1:
                raise ValueError(f"{kind} payload shapes differ: {sorted(shapes)}")
            acc = arrays[0].copy()
            for a in arrays[1:]:
                acc += a
            scalar = np.isscalar(op.payloads[op.group[0]])
            m = int(acc.size)
            if kind == "all_reduce":
                chunks = ring_chunks(m, g)
                sent = [2 * (m - chunks[p]) for p in range(g)]
                msgs = 2 * (g - 1)
                for p, r in enumerate(op.group):
                    out = float(acc) if scalar else acc.copy()
                    op.outputs[r] = self._finish_output(r, tag, out)
            else:
                part = params[0]
                row_words = m // acc.shape[0] if acc.shape[0] else 0
                sent = [m - (b - a) * row_words for a, b in part]
                msgs = g - 1
                for (a, b), r in zip(part, op.group):
                    op.outputs[r] = self._finish_output(r, tag, acc[a:b].copy())
            for p, r in enumerate(op.group):
                charge(r, category, messages=msgs, words=sent[p], recv_messages=msgs, recv_words=sent[p - 1], volume_words=m)
        elif kind == "all_gather":
            axis = params[0]
            pieces = [np.asarray(op.payloads[r], dtype=np.float64) for r in op.group]
            if any(p.ndim != 2 for p in pieces):
                raise ValueError("all_gather pieces must be 2-D")
            other = {p.shape[1 - axis] for p in pieces}
            if len(other) != 1:
                raise ValueError(f"all_gather pieces disagree along axis {1 - axis}: {sorted(other)}")
            full = np.concatenate(pieces, axis=axis)
            m = int(full.size)
            sent = [m - int(p.size) for p in pieces]
            for p, r in enumerate(op.group):
                op.outputs[r] = self._finish_output(r, tag, full.copy())
                charge(r, category, messages=g - 1, words=sent[p], recv_messages=g - 1, recv_words=sent[p - 1], volume_words=m)
        else:  # pragma: no cover - guarded by RankContext
            raise ValueError(f"unknown collective {kind}")
        self.events.append(
            {
                "kind": kind,
                "category": category,
                "group": op.group,
                "seq": op.seq,
                "words": m,
                "tag": tag,
            }
        )
