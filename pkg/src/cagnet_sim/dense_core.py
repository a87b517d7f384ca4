"""Dense kernels shared by the serial and distributed paths.

Dense matrices are plain 2-D float64 numpy arrays. Every kernel fixes its
accumulation order so that results do not depend on how the operands were
tiled across ranks:

* :func:`gemm` sums over the inner index ``k`` one rank-1 update at a time,
  so the panels of a SUMMA loop reproduce the serial product bitwise;
* :func:`log_softmax_rows` reduces each row left to right independently of
  how many rows are present.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np


class ActivationKind(Enum):
    RELU = "relu"
    LOG_SOFTMAX_ROWS = "log_softmax_rows"


def as_dense(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def gemm(
    a: np.ndarray,
    b: np.ndarray,
    transpose_a: bool = False,
    transpose_b: bool = False,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """``op(a) @ op(b)``, accumulated into ``out`` when given.

    The sum over the inner index runs in ascending ``k``; calling ``gemm`` on
    consecutive inner-dimension panels with a shared ``out`` is bitwise equal
    to one call on the whole operands.
    """
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    a = a.T if transpose_a else a
    b = b.T if transpose_b else b
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"gemm inner dimensions differ: {a.shape} x {b.shape}")
    shape = (a.shape[0], b.shape[1])
    if out is None:
        out = np.zeros(shape)
    elif out.shape != shape:
        raise ValueError(f"gemm output has shape {out.shape}, expected {shape}")
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    return a * b


def relu(z: np.ndarray) -> np.ndarray:
    z = as_dense(z, "z")
    return np.where(z > 0, z, 0.0)


def relu_prime(z: np.ndarray) -> np.ndarray:
    """1 where ``z > 0`` and 0 elsewhere, including at exactly zero."""
    return (as_dense(z, "z") > 0).astype(np.float64)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = as_dense(z, "z")
    if z.shape[1] < 1:
        raise ValueError("log_softmax_rows needs at least one column")
    shifted = z - z.max(axis=1, keepdims=True)
    total = np.zeros(z.shape[0])
    for j in range(z.shape[1]):
        total += np.exp(shifted[:, j])
    return shifted - np.log(total)[:, None]


def apply_activation(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    if kind is ActivationKind.RELU:
        return relu(z)
    return log_softmax_rows(z)


def nll_loss_and_grad(
    logp: np.ndarray,
    labels,
    train_mask,
    normalizer: int | None = None,
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over masked rows and its gradient in ``Z``.

    ``logp`` must be a :func:`log_softmax_rows` output; the returned gradient
    is taken with respect to the pre-softmax logits. ``normalizer`` overrides
    the train-set size, which lets a rank holding only some rows produce its
    share of a global loss. The returned loss is then the local partial sum
    divided by ``normalizer``.
    """
    logp = as_dense(logp, "logp")
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(train_mask, dtype=bool)
    rows, cols = logp.shape
    if labels.shape != (rows,) or mask.shape != (rows,):
        raise ValueError(f"labels and train_mask must have length {rows}")
    count = int(mask.sum()) if normalizer is None else int(normalizer)
    if count <= 0:
        raise ValueError("the train set is empty")
    picked = labels[mask]
    if picked.size and (picked.min() < 0 or picked.max() >= cols):
        raise ValueError(f"labels must lie in [0, {cols}) for training rows")
    idx = np.nonzero(mask)[0]
    loss = -math.fsum(logp[idx, picked]) / count
    grad = np.zeros_like(logp)
    grad[idx] = np.exp(logp[idx])
    grad[idx, picked] -= 1.0
    grad[idx] /= count
    return loss, grad
