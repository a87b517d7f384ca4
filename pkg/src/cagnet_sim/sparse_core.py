"""Compressed sparse row storage, graph ingestion and the local SpMM kernel.

All matrices are float64. A :class:`CsrMatrix` is canonical once built:
columns strictly increase inside every row, and no explicit zeros are kept.
Instances are immutable (their arrays are flagged read-only), so ranks of the
simulated runtime can share them without copying.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .rng import make_rng


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rp, ci, va = self.row_ptr, self.col_idx, self.values
        if rp.shape != (self.n_rows + 1,) or rp[0] != 0:
            raise ValueError("row_ptr must have n_rows + 1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if rp[-1] != ci.size or ci.size != va.size:
            raise ValueError("row_ptr[-1], len(col_idx) and len(values) disagree")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.n_cols:
                raise ValueError("column index out of range")
            rows = np.repeat(np.arange(self.n_rows), np.diff(rp))
            same_row = rows[1:] == rows[:-1]
            if np.any((np.diff(ci) <= 0) & same_row):
                raise ValueError("column indices must strictly increase within each row")
            if np.any(va == 0.0):
                raise ValueError("explicit zeros are not stored")
        for arr in (rp, ci, va):
            _frozen(arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    @property
    def words(self) -> int:
        """Payload size used by the communication ledger: one word per nonzero."""
        return self.nnz

    def row_degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), self.row_degrees())

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_idx] = self.values
        return out

    def equals(self, other: "CsrMatrix") -> bool:
        """Bitwise structural and value equality."""
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self) -> str:
        return f"CsrMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


def from_coo(n_rows: int, n_cols: int, rows, cols, values) -> CsrMatrix:
    """Build a canonical CSR from coordinates that contain no duplicates."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    keep = values != 0.0
    rows, cols, values = rows[keep], cols[keep], values[keep]
    order = np.lexsort((cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    if rows.size > 1:
        dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
        if np.any(dup):
            raise ValueError("duplicate coordinates passed to from_coo")
    counts = np.bincount(rows, minlength=n_rows) if rows.size else np.zeros(n_rows, np.int64)
    row_ptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return CsrMatrix(int(n_rows), int(n_cols), row_ptr, cols.copy(), values.copy())


def from_dense(dense) -> CsrMatrix:
    dense = np.asarray(dense, dtype=np.float64)
    r, c = np.nonzero(dense)
    return from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c])


def empty(n_rows: int, n_cols: int) -> CsrMatrix:
    return from_coo(n_rows, n_cols, [], [], [])


def identity(n: int) -> CsrMatrix:
    idx = np.arange(n)
    return from_coo(n, n, idx, idx, np.ones(n))


def from_edge_list(
    edges: Iterable[Sequence[int]],
    n: int,
    undirected: bool = False,
    line_numbers: Sequence[int] | None = None,
) -> CsrMatrix:
    """Unweighted adjacency from ``(u, v)`` pairs; duplicates collapse to 1.0.

    ``line_numbers`` lets file readers report the source line of a bad pair;
    otherwise the 1-based position in ``edges`` is reported.
    """
    pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    bad = np.nonzero((pairs < 0) | (pairs >= n))[0]
    if bad.size:
        k = int(bad[0])
        where = line_numbers[k] if line_numbers is not None else k + 1
        u, v = pairs[k]
        raise ValueError(f"line {where}: edge ({u}, {v}) has a vertex index outside [0, {n})")
    u, v = pairs[:, 0], pairs[:, 1]
    if undirected:
        u, v = np.concatenate((u, v)), np.concatenate((v, u))
    keys = np.unique(u * n + v)
    return from_coo(n, n, keys // n, keys % n, np.ones(keys.size))


def transpose(a: CsrMatrix) -> CsrMatrix:
    rows = a.row_ids()
    order = np.lexsort((rows, a.col_idx))
    new_rows = a.col_idx[order]
    counts = np.bincount(new_rows, minlength=a.n_cols) if a.nnz else np.zeros(a.n_cols, np.int64)
    row_ptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return CsrMatrix(a.n_cols, a.n_rows, row_ptr, rows[order].copy(), a.values[order].copy())


def _as_range(r, limit: int, what: str) -> tuple[int, int]:
    if isinstance(r, range):
        if r.step != 1:
            raise ValueError(f"{what} range must have step 1")
        start, stop = r.start, r.stop
    else:
        start, stop = r
    if not (0 <= start <= stop <= limit):
        raise ValueError(f"{what} range [{start}, {stop}) outside [0, {limit}]")
    return int(start), int(stop)


def extract_block(a: CsrMatrix, row_range, col_range) -> CsrMatrix:
    """Submatrix ``a[r0:r1, c0:c1]`` with local (re-based) indices."""
    r0, r1 = _as_range(row_range, a.n_rows, "row")
    c0, c1 = _as_range(col_range, a.n_cols, "column")
    lo, hi = a.row_ptr[r0], a.row_ptr[r1]
    cols = a.col_idx[lo:hi]
    keep = (cols >= c0) & (cols < c1)
    rows = np.repeat(np.arange(r1 - r0), np.diff(a.row_ptr[r0 : r1 + 1]))[keep]
    counts = np.bincount(rows, minlength=r1 - r0) if rows.size else np.zeros(r1 - r0, np.int64)
    row_ptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return CsrMatrix(r1 - r0, c1 - c0, row_ptr, cols[keep] - c0, a.values[lo:hi][keep].copy())


def hstack(blocks: Sequence[CsrMatrix]) -> CsrMatrix:
    if not blocks:
        raise ValueError("hstack needs at least one block")
    n_rows = blocks[0].n_rows
    if any(b.n_rows != n_rows for b in blocks):
        raise ValueError("hstack blocks must have equal row counts")
    rows, cols, vals, offset = [], [], [], 0
    for b in blocks:
        rows.append(b.row_ids())
        cols.append(b.col_idx + offset)
        vals.append(b.values)
        offset += b.n_cols
    return from_coo(n_rows, offset, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def vstack(blocks: Sequence[CsrMatrix]) -> CsrMatrix:
    if not blocks:
        raise ValueError("vstack needs at least one block")
    n_cols = blocks[0].n_cols
    if any(b.n_cols != n_cols for b in blocks):
        raise ValueError("vstack blocks must have equal column counts")
    row_ptr = [np.zeros(1, np.int64)]
    base = 0
    for b in blocks:
        row_ptr.append(b.row_ptr[1:] + base)
        base += b.nnz
    return CsrMatrix(
        sum(b.n_rows for b in blocks),
        n_cols,
        np.concatenate(row_ptr),
        np.concatenate([b.col_idx for b in blocks]),
        np.concatenate([b.values for b in blocks]),
    )


def spmm(a: CsrMatrix, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Sparse times dense, accumulated into ``out`` when given.

    Each output row is updated one nonzero at a time in ascending column
    order, so splitting ``a`` into column panels and calling ``spmm`` on the
    panels in order yields bitwise the same result as one call on ``a``.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != a.n_cols:
        raise ValueError(f"spmm dimension mismatch: {a.shape} x {b.shape}")
    if out is None:
        out = np.zeros((a.n_rows, b.shape[1]))
    elif out.shape != (a.n_rows, b.shape[1]):
        raise ValueError(f"spmm output has shape {out.shape}, expected {(a.n_rows, b.shape[1])}")
    if a.nnz == 0 or b.shape[1] == 0:
        return out
    deg = a.row_degrees()
    for p in range(int(deg.max())):
        rows = np.nonzero(deg > p)[0]
        idx = a.row_ptr[rows] + p
        out[rows] += a.values[idx, None] * b[a.col_idx[idx]]
    return out


def add_self_loops_and_normalize(a: CsrMatrix) -> CsrMatrix:
    """Symmetric degree normalisation ``D^-1/2 (A + I) D^-1/2``.

    ``D`` holds the row sums of ``A + I``; for directed input these are
    out-degrees, and the caller is expected to derive the transpose from the
    result rather than normalising both orientations separately.
    """
    if a.n_rows != a.n_cols:
        raise ValueError(f"normalisation needs a square matrix, got {a.shape}")
    n = a.n_rows
    dense_diag = np.zeros(n)
    rows = a.row_ids()
    on_diag = rows == a.col_idx
    dense_diag[rows[on_diag]] = a.values[on_diag]
    off = ~on_diag
    idx = np.arange(n)
    r = np.concatenate((rows[off], idx))
    c = np.concatenate((a.col_idx[off], idx))
    v = np.concatenate((a.values[off], dense_diag + 1.0))
    plus_i = from_coo(n, n, r, c, v)
    deg = np.add.reduceat(plus_i.values, plus_i.row_ptr[:-1]) if n else np.zeros(0)
    pr = plus_i.row_ids()
    vals = plus_i.values / np.sqrt(deg[pr] * deg[plus_i.col_idx])
    return CsrMatrix(n, n, plus_i.row_ptr.copy(), plus_i.col_idx.copy(), vals)


def generate_erdos_renyi(n: int, d: float, seed: int, undirected: bool = False) -> CsrMatrix:
    """G(n, d/n) without self-loops.

    Directed by default: each ordered pair ``(u, v)``, ``u != v``, is an edge
    independently with probability ``d/n``. The undirected variant draws each
    unordered pair once and mirrors it. Row counts are drawn binomially and
    columns sampled without replacement, which is the same distribution as
    per-pair Bernoulli trials but never materialises an ``n x n`` array.
    """
    if not 0 < d < n:
        raise ValueError(f"need 0 < d < n, got d={d}, n={n}")
    rng = make_rng(seed)
    p = d / n
    rows, cols = [], []
    for u in range(n):
        if undirected:
            pool = n - u - 1
            k = int(rng.binomial(pool, p)) if pool else 0
            picks = rng.choice(pool, size=k, replace=False) + u + 1 if k else np.empty(0, np.int64)
        else:
            k = int(rng.binomial(n - 1, p))
            picks = rng.choice(n - 1, size=k, replace=False) if k else np.empty(0, np.int64)
            picks = picks + (picks >= u)
        rows.append(np.full(picks.size, u, dtype=np.int64))
        cols.append(picks.astype(np.int64))
    r = np.concatenate(rows) if rows else np.empty(0, np.int64)
    c = np.concatenate(cols) if cols else np.empty(0, np.int64)
    if undirected:
        r, c = np.concatenate((r, c)), np.concatenate((c, r))
    return from_coo(n, n, r, c, np.ones(r.size))


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Normalised graph plus vertex data.

    ``adj`` is the normalised ``A``; ``adj_t`` is its exact transpose, which the
    forward pass aggregates with.
    """

    adj: CsrMatrix
    adj_t: CsrMatrix
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray

    def __post_init__(self):
        n = self.adj.n_rows
        if self.adj.shape != (n, n) or self.adj_t.shape != (n, n):
            raise ValueError("adjacency matrices must be n x n")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must have {n} rows")
        if self.labels.shape != (n,) or self.train_mask.shape != (n,):
            raise ValueError(f"labels and train_mask must have length {n}")
        if n and np.any(self.adj.row_degrees() == 0):
            raise ValueError("every vertex needs a nonzero row (normalise first)")
        for arr in (self.features, self.labels, self.train_mask):
            _frozen(arr)

    @property
    def n(self) -> int:
        return self.adj.n_rows

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def symmetric(self) -> bool:
        return self.adj.equals(self.adj_t)


def build_dataset(raw_adj: CsrMatrix, features, labels, train_mask=None) -> GraphDataset:
    adj = add_self_loops_and_normalize(raw_adj)
    labels = np.asarray(labels, dtype=np.int64).copy()
    if train_mask is None:
        train_mask = np.ones(raw_adj.n_rows, dtype=bool)
    return GraphDataset(
        adj=adj,
        adj_t=transpose(adj),
        features=np.array(features, dtype=np.float64),
        labels=labels,
        train_mask=np.asarray(train_mask, dtype=bool).copy(),
    )


def permute_matrix(a: CsrMatrix, perm: np.ndarray) -> CsrMatrix:
    """``P A P^T``: new row/column ``i`` is old row/column ``perm[i]``."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return from_coo(a.n_rows, a.n_cols, inv[a.row_ids()], inv[a.col_idx], a.values)


def apply_permutation(g: GraphDataset, perm) -> GraphDataset:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (g.n,) or not np.array_equal(np.sort(perm), np.arange(g.n)):
        raise ValueError("perm must be a permutation of range(n)")
    adj = permute_matrix(g.adj, perm)
    return GraphDataset(
        adj=adj,
        adj_t=transpose(adj),
        features=g.features[perm].copy(),
        labels=g.labels[perm].copy(),
        train_mask=g.train_mask[perm].copy(),
    )


def permute_random(g: GraphDataset, seed: int) -> tuple[GraphDataset, np.ndarray]:
    """Relabel vertices with a seeded Fisher-Yates shuffle.

    Returns the permuted dataset and ``perm``; ``apply_permutation(result,
    np.argsort(perm))`` restores the input.
    """
    perm = make_rng(seed).permutation(g.n)
    return apply_permutation(g, perm), perm
