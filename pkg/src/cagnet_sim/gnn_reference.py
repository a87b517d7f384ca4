"""Serial full-batch GCN training, used as the numerical oracle."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dense_core import ActivationKind, gemm, hadamard, log_softmax_rows, nll_loss_and_grad, relu, relu_prime
from .rng import make_rng
from .sparse_core import CsrMatrix, GraphDataset, spmm


@dataclass(frozen=True)
class GnnModel:
    """Weights ``W^0 .. W^{L-2}``; ``weights[l]`` maps width ``layer_dims[l]`` to ``layer_dims[l+1]``."""

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    learning_rate: float = 1.0
    hidden_activation: ActivationKind = ActivationKind.RELU
    final_activation: ActivationKind = ActivationKind.LOG_SOFTMAX_ROWS

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("a model needs at least two layer widths (L >= 2)")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if len(self.weights) != len(dims) - 1:
            raise ValueError(f"expected {len(dims) - 1} weight matrices, got {len(self.weights)}")
        for l, w in enumerate(self.weights):
            if w.shape != (dims[l], dims[l + 1]):
                raise ValueError(f"weights[{l}] has shape {w.shape}, expected {(dims[l], dims[l + 1])}")
        if self.hidden_activation is not ActivationKind.RELU:
            raise ValueError("hidden layers use ReLU")
        if self.final_activation is not ActivationKind.LOG_SOFTMAX_ROWS:
            raise ValueError("the final layer uses row-wise log-softmax")

    @property
    def n_layers(self) -> int:
        """``L``: the number of feature widths, one more than the number of weight matrices."""
        return len(self.layer_dims)

    def activation(self, layer: int) -> ActivationKind:
        """Activation applied to ``Z^layer`` (1-based, as in ``H^layer = sigma(Z^layer)``)."""
        return self.final_activation if layer == self.n_layers - 1 else self.hidden_activation


def init_glorot(layer_dims, seed: int, learning_rate: float = 1.0) -> GnnModel:
    dims = tuple(int(d) for d in layer_dims)
    rng = make_rng(seed)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return GnnModel(dims, tuple(weights), learning_rate)


@dataclass
class ForwardTape:
    """``zs[l]`` is ``Z^l`` for ``l >= 1`` (``zs[0]`` is None); ``hs[l]`` is ``H^l``."""

    zs: list = field(default_factory=list)
    hs: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.hs[-1]


def forward_serial(adj_t: CsrMatrix, model: GnnModel, h0: np.ndarray) -> ForwardTape:
    h0 = np.asarray(h0, dtype=np.float64)
    n = adj_t.n_rows
    if adj_t.shape != (n, n):
        raise ValueError(f"adj_t must be square, got {adj_t.shape}")
    if h0.shape != (n, model.layer_dims[0]):
        raise ValueError(f"H0 has shape {h0.shape}, expected {(n, model.layer_dims[0])}")
    tape = ForwardTape(zs=[None], hs=[h0])
    for l in range(1, model.n_layers):
        t = spmm(adj_t, tape.hs[-1])
        z = gemm(t, model.weights[l - 1])
        h = relu(z) if model.activation(l) is ActivationKind.RELU else log_softmax_rows(z)
        tape.zs.append(z)
        tape.hs.append(h)
    return tape


@dataclass
class Gradients:
    """``ys[l]`` is ``Y^l``, the gradient for ``weights[l]``; ``gs[l]`` is ``G^l`` for ``l >= 1``."""

    ys: list
    gs: list
    loss: float


def backward_serial(adj: CsrMatrix, model: GnnModel, tape: ForwardTape, labels, train_mask) -> Gradients:
    L = model.n_layers
    if len(tape.hs) != L or len(tape.zs) != L:
        raise ValueError(f"tape holds {len(tape.hs)} layers, model has {L}")
    loss, g = nll_loss_and_grad(tape.output, labels, train_mask)
    ys: list = [None] * (L - 1)
    gs: list = [None] * L
    gs[L - 1] = g
    for l in range(L - 1, 0, -1):
        s = spmm(adj, gs[l])
        ys[l - 1] = gemm(tape.hs[l - 1], s, transpose_a=True)
        if l > 1:
            gs[l - 1] = hadamard(gemm(s, model.weights[l - 1], transpose_b=True), relu_prime(tape.zs[l - 1]))
    return Gradients(ys, gs, loss)


def sgd_step(model: GnnModel, gradients) -> GnnModel:
    ys = gradients.ys if isinstance(gradients, Gradients) else gradients
    if len(ys) != len(model.weights):
        raise ValueError(f"expected {len(model.weights)} gradients, got {len(ys)}")
    new = []
    for w, y in zip(model.weights, ys):
        if y.shape != w.shape:
            raise ValueError(f"gradient shape {y.shape} does not match weight shape {w.shape}")
        new.append(w - model.learning_rate * y)
    return replace(model, weights=tuple(new))


@dataclass
class EpochRecord:
    loss: float
    output: np.ndarray
    gradients: list
    grads_g: list
    weights: tuple


def train_serial(dataset: GraphDataset, model: GnnModel, epochs: int, record: bool = False):
    """Full-batch descent. Returns ``(model, losses)``, plus per-epoch records when ``record``.

    Each record captures the forward output, gradients and the weights after
    that epoch's update.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    losses, records = [], []
    for _ in range(epochs):
        tape = forward_serial(dataset.adj_t, model, dataset.features)
        grads = backward_serial(dataset.adj, model, tape, dataset.labels, dataset.train_mask)
        model = sgd_step(model, grads)
        losses.append(grads.loss)
        if record:
            records.append(EpochRecord(grads.loss, tape.output, grads.ys, grads.gs, model.weights))
    return (model, losses, records) if record else (model, losses)
