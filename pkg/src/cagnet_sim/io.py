"""Text formats for graphs, features and labels.

* Edge lists: one ``u v`` pair per line, 0-based; ``#`` starts a comment; an
  optional ``% n <count>`` line fixes the vertex count (otherwise it is the
  largest index plus one).
* Features: CSV, one row per vertex, no header.
* Labels: CSV of ``vertex,label`` pairs; vertices without a row are unlabeled
  and excluded from training.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .sparse_core import CsrMatrix, from_edge_list


def read_edge_list(path, undirected: bool = False) -> CsrMatrix:
    edges, lines, n = [], [], None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith("%"):
                parts = text[1:].split()
                if len(parts) != 2 or parts[0] != "n":
                    raise ValueError(f"{path}:{lineno}: expected '% n <count>', got {raw.strip()!r}")
                n = int(parts[1])
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'u v', got {raw.strip()!r}")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: vertex ids must be integers, got {raw.strip()!r}") from None
            lines.append(lineno)
    if n is None:
        n = max((max(e) for e in edges), default=-1) + 1
    return from_edge_list(edges, n, undirected=undirected, line_numbers=lines)


def write_edge_list(path, a: CsrMatrix) -> None:
    with open(path, "w") as fh:
        fh.write(f"% n {a.n_rows}\n")
        for u, v in zip(a.row_ids(), a.col_idx):
            fh.write(f"{u} {v}\n")


def read_features(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)


def write_features(path, x: np.ndarray) -> None:
    np.savetxt(path, x, delimiter=",", fmt="%.17g")


def read_labels(path, n: int) -> tuple[np.ndarray, np.ndarray]:
    labels = np.zeros(n, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#") or row == ["vertex", "label"]:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'vertex,label'")
            v, y = int(row[0]), int(row[1])
            if not 0 <= v < n:
                raise ValueError(f"{path}:{lineno}: vertex {v} outside [0, {n})")
            if y < 0:
                raise ValueError(f"{path}:{lineno}: negative label {y}")
            labels[v], mask[v] = y, True
    return labels, mask


def write_labels(path, labels: np.ndarray, mask: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex", "label"])
        for v, y in enumerate(labels):
            if mask is None or mask[v]:
                w.writerow([v, int(y)])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
