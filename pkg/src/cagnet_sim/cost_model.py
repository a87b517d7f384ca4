"""Alpha-beta communication and memory models, and reconciliation with measured ledgers.

Counts are exact rationals (``fractions.Fraction``); ``lg x`` is the smallest
integer ``k`` with ``2**k >= x``. Every prediction carries two forms:

* ``words``/``messages``/``breakdown``: the closed form, ``L`` times a
  per-layer cost with the average feature width ``f``;
* ``layerwise``: the same per-layer cost summed over the ``L - 1`` weight
  transitions of ``layer_dims``, with ``nf`` split as ``n f^{l-1}`` for the
  forward aggregation and ``n f^l`` for the backward one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd, isqrt

from .sim_runtime import icbrt


def lg(x) -> int:
    x = Fraction(x)
    if x <= 1:
        return 0
    k = 0
    while 2**k < x:
        k += 1
    return k


def as_number(x: Fraction):
    """An int when exact, otherwise a float; for JSON output."""
    x = Fraction(x)
    return int(x) if x.denominator == 1 else float(x)


@dataclass(frozen=True)
class CostParams:
    n: int
    layer_dims: tuple[int, ...]
    P: int
    nnz: int = 0
    c: int = 1
    rows: int | None = None
    cols: int | None = None
    L: int | None = None
    f: Fraction | None = None
    alpha: Fraction = Fraction(1)
    beta: Fraction = Fraction(1)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if not dims or any(d < 1 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if self.n < 1 or self.P < 1 or self.nnz < 0 or self.c < 1:
            raise ValueError("n, P and c must be positive and nnz non-negative")
        if self.L is None:
            object.__setattr__(self, "L", len(dims))
        f = Fraction(sum(dims), len(dims)) if self.f is None else Fraction(self.f)
        object.__setattr__(self, "f", f)

    @classmethod
    def uniform(cls, n: int, f: int, L: int, P: int, **kw) -> "CostParams":
        return cls(n=n, layer_dims=(f,) * L, P=P, L=L, f=Fraction(f), **kw)

    @property
    def transitions(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def f_max(self) -> int:
        return max(self.layer_dims)


@dataclass
class CostPrediction:
    strategy: str
    messages: Fraction
    words: Fraction
    breakdown: dict
    layerwise: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if sum(self.breakdown.values(), Fraction(0)) != self.words:
            raise AssertionError("breakdown must sum to the total")

    def time(self, alpha, beta) -> Fraction:
        return Fraction(alpha) * self.messages + Fraction(beta) * self.words

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "messages": as_number(self.messages),
            "words": as_number(self.words),
            "breakdown": {k: as_number(v) for k, v in self.breakdown.items()},
            "layerwise": {
                "messages": as_number(self.layerwise["messages"]),
                "words": as_number(self.layerwise["words"]),
                "breakdown": {k: as_number(v) for k, v in self.layerwise["breakdown"].items()},
            },
            "notes": list(self.notes),
        }


def _layerwise(p: CostParams, per_layer_messages, terms: dict) -> dict:
    """Sum ``terms[name](a, b)`` over the weight transitions ``a -> b``."""
    breakdown = {name: sum((Fraction(fn(a, b)) for a, b in p.transitions), Fraction(0)) for name, fn in terms.items()}
    return {
        "messages": Fraction(per_layer_messages) * len(p.transitions),
        "words": sum(breakdown.values(), Fraction(0)),
        "breakdown": breakdown,
    }


def _scaled(L: int, per_layer: dict) -> dict:
    return {k: L * Fraction(v) for k, v in per_layer.items()}


def predict_1d(p: CostParams) -> CostPrediction:
    n, f, P, L = p.n, p.f, p.P, p.L
    msgs = lg(P) + 2 * P
    breakdown = _scaled(L, {"dense": 2 * n * f, "small": f * f})
    notes = ["P=1: the formula still charges the broadcasts that a single rank never performs"] if P == 1 else []
    return CostPrediction(
        "1d",
        Fraction(L * msgs),
        sum(breakdown.values(), Fraction(0)),
        breakdown,
        _layerwise(p, msgs, {"dense": lambda a, b: n * (a + b), "small": lambda a, b: a * b}),
        notes,
    )


def _check_15d(p: CostParams):
    if p.P % p.c:
        raise ValueError(f"c={p.c} must divide P={p.P}")
    if p.c * p.c > p.P:
        raise ValueError(f"1.5D needs c^2 <= P; got c={p.c}, P={p.P}")


def predict_15d(p: CostParams) -> CostPrediction:
    _check_15d(p)
    n, f, P, c, L = p.n, p.f, p.P, p.c, p.L
    stages = Fraction(P, c * c)
    msgs = 2 * stages * lg(stages)
    breakdown = _scaled(L, {"column_broadcast": Fraction(2 * n) * f / c, "row_allreduce": Fraction(2 * n * c) * f / P})
    layer = _layerwise(
        p,
        msgs,
        {
            "column_broadcast": lambda a, b: Fraction(n * (a + b), c),
            "row_allreduce": lambda a, b: Fraction(n * c * (a + b), P),
            "small": lambda a, b: a * b,
        },
    )
    return CostPrediction("1.5d", L * msgs, sum(breakdown.values(), Fraction(0)), breakdown, layer)


def _sqrt_p(P: int) -> int:
    g = isqrt(P)
    if g * g != P:
        raise ValueError(f"square 2D needs a perfect-square P, got {P}")
    return g


def predict_2d(p: CostParams) -> CostPrediction:
    n, f, L, nnz = p.n, p.f, p.L, p.nnz
    g = _sqrt_p(p.P)
    msgs = 5 * g + 3 * lg(p.P)
    breakdown = _scaled(L, {"dense": Fraction(8 * n) * f / g, "sparse": Fraction(2 * nnz, g), "small": f * f})
    layer = _layerwise(
        p,
        msgs,
        {
            "dense": lambda a, b: Fraction(4 * n * (a + b), g),
            "sparse": lambda a, b: Fraction(2 * nnz, g),
            "small": lambda a, b: a * b,
        },
    )
    return CostPrediction("2d", L * msgs, sum(breakdown.values(), Fraction(0)), breakdown, layer)


def predict_2d_rect(p: CostParams) -> CostPrediction:
    """Forward aggregation only, on a ``rows x cols`` grid."""
    pr, pc = p.rows, p.cols
    if pr is None or pc is None or pr * pc != p.P:
        raise ValueError(f"rectangular 2D needs rows*cols == P; got {pr}x{pc} for P={p.P}")
    n, f, nnz = p.n, p.f, p.nnz
    breakdown = {"sparse": Fraction(nnz, pr), "dense_cols": Fraction(n) * f / pc, "dense_rows": Fraction(n) * f / pr}
    layer = _layerwise(
        p,
        gcd(pr, pc),
        {
            "sparse": lambda a, b: Fraction(nnz, pr),
            "dense_cols": lambda a, b: Fraction(n * a, pc),
            "dense_rows": lambda a, b: Fraction(n * a, pr),
        },
    )
    return CostPrediction("2d-rect", Fraction(gcd(pr, pc)), sum(breakdown.values(), Fraction(0)), breakdown, layer)


def _cube_root(P: int) -> int:
    s = icbrt(P)
    if s < 1:
        raise ValueError(f"3D needs a perfect-cube P, got {P}")
    return s


def predict_3d(p: CostParams) -> CostPrediction:
    n, f, L, nnz = p.n, p.f, p.L, p.nnz
    s = _cube_root(p.P)
    msgs = 4 * s
    breakdown = _scaled(L, {"sparse": Fraction(2 * nnz, s * s), "dense": Fraction(12 * n) * f / (s * s)})
    layer = _layerwise(
        p,
        msgs,
        {
            "sparse": lambda a, b: Fraction(2 * nnz, s * s),
            "dense": lambda a, b: Fraction(6 * n * (a + b), s * s),
        },
    )
    return CostPrediction("3d", L * msgs, sum(breakdown.values(), Fraction(0)), breakdown, layer)


PREDICTORS = {"1d": predict_1d, "1.5d": predict_15d, "2d": predict_2d, "3d": predict_3d}


def predict(strategy: str, p: CostParams) -> CostPrediction:
    if strategy not in PREDICTORS:
        raise ValueError(f"unknown strategy {strategy!r}")
    return PREDICTORS[strategy](p)


def memory_footprints(p: CostParams) -> dict:
    """Total words held, in the optimal and replicated schemes.

    ``single_adjacency_variant`` is our alternative to the 1.5D total that
    stores the replicated adjacency once rather than once per layer.
    """
    n, nnz, L, c, P = p.n, p.nnz, p.L, p.c, p.P
    f = p.f
    acts = [n * d for d in p.layer_dims]
    k = p.layer_dims.index(p.f_max)
    out = {
        "optimal": nnz + sum(acts),
        "one_five_d_total": L * c * (nnz + n * f),
        "one_five_d_proc": L * (Fraction(nnz * c, P) + Fraction(n * c, P) * f),
        "single_adjacency_variant": c * (nnz + L * n * f),
    }
    s = icbrt(P)
    if s >= 1:
        out["three_d_total"] = nnz + sum(a for i, a in enumerate(acts) if i != k) + s * n * p.f_max
    return {key: Fraction(v) for key, v in out.items()}


# ---------------------------------------------------------------- reconciliation


def expected_ledger(strategy: str, n: int, nnz: int, layer_dims, P: int, c: int = 1) -> dict:
    """Exact mean per-rank words per epoch under the runtime's ledger conventions.

    Keys are ``(category, field)``; ``nnz`` counts the normalised adjacency.
    """
    pairs = list(zip(layer_dims[:-1], layer_dims[1:]))
    F = Fraction
    out: dict = {}
    if strategy == "1d":
        live = P > 1
        out[("dbcast", "volume_words")] = F(sum(n * (a + b) for a, b in pairs)) if live else F(0)
        out[("dbcast", "recv_words")] = F(P - 1, P) * sum(n * (a + b) for a, b in pairs)
        out[("sbcast", "volume_words")] = F(0)
        out[("reduce", "volume_words")] = F(sum(a * b for a, b in pairs) + 1) if live else F(0)
    elif strategy == "1.5d":
        R = P // c
        out[("dbcast", "volume_words")] = F(sum(n * (a + b) for a, b in pairs), c) if R > 1 else F(0)
        out[("sbcast", "volume_words")] = F(0)
        row = F(sum(n * c * (a + b) for a, b in pairs), P) if c > 1 else F(0)
        col = F(sum(a * b for a, b in pairs) + 1) if R > 1 else F(0)
        out[("reduce", "volume_words")] = row + col
    elif strategy in ("2d", "3d"):
        d = _sqrt_p(P) if strategy == "2d" else _cube_root(P) ** 2
        live = P > 1
        dense = sum(3 * n * a + n * b + (n * b if l > 0 else 0) for l, (a, b) in enumerate(pairs))
        out[("dbcast", "volume_words")] = F(dense, d) if live else F(0)
        out[("sbcast", "volume_words")] = F(2 * nnz * len(pairs), d) if live else F(0)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return out


# (model term names, ledger categories, ledger field, scale, tolerance factor)
CONVENTION_TABLE = {
    "1d": [
        (("dense",), ("dbcast",), "recv_words", "(P-1)/P", 1),
        (("small",), ("reduce",), "volume_words", "1", Fraction(21, 20)),
    ],
    "1.5d": [
        (("column_broadcast",), ("dbcast",), "volume_words", "1", 1),
        (("row_allreduce", "small"), ("reduce",), "volume_words", "1", Fraction(21, 20)),
    ],
    "2d": [
        (("dense",), ("dbcast", "reduce", "allgather"), "volume_words", "1", 2),
        (("sparse",), ("sbcast",), "volume_words", "1", 2),
    ],
    "3d": [
        (("dense",), ("dbcast", "reduce", "allgather"), "volume_words", "1", 2),
        (("sparse",), ("sbcast",), "volume_words", "1", 2),
    ],
}


def _singleton_terms(strategy: str, params: CostParams) -> set:
    """Model terms whose collectives run over one-rank groups, which move nothing."""
    if strategy == "1.5d":
        free = set()
        if params.c == 1:
            free.add("row_allreduce")
        if params.P == params.c:
            free |= {"column_broadcast", "small"}
        return free
    return set()


def _mean_field(report: dict, categories, field_name: str, epochs: int) -> Fraction:
    ranks = report["grid"]["ranks"]
    total = sum(sum(report["per_rank"][cat][field_name]) for cat in categories)
    return Fraction(total, ranks * epochs)


def compare_report(
    strategy: str,
    params: CostParams,
    report: dict,
    epochs: int = 1,
    setup_report: dict | None = None,
) -> dict:
    """Measured per-rank traffic against the layer-wise model and the exact ledger tally.

    ``report`` is a :func:`ledger_report` covering ``epochs`` epochs. Model
    terms map onto ledger categories through :data:`CONVENTION_TABLE`; a term
    passes when measured/predicted lies within ``[1/tol, tol]``. The exact
    tallies from :func:`expected_ledger` must match to the word.
    """
    kind = {"1d": "1d", "1.5d": "1.5d", "2d": "2d", "3d": "3d"}.get(strategy)
    grid = report["grid"]
    if kind is None or grid["kind"] != kind or grid["ranks"] != params.P:
        raise ValueError(f"report is for a {grid['kind']} grid of {grid['ranks']} ranks, not {strategy} with P={params.P}")
    if strategy == "1.5d" and grid["dims"][1] != params.c:
        raise ValueError(f"report has c={grid['dims'][1]}, params say c={params.c}")
    prediction = predict(strategy, params)
    degenerate = params.P == 1
    predicted, measured, ratios, verdicts = {}, {}, {}, {}
    free = _singleton_terms(strategy, params)
    for terms, cats, field_name, scale, tol in CONVENTION_TABLE[strategy]:
        key = "+".join(terms)
        factor = Fraction(params.P - 1, params.P) if scale == "(P-1)/P" else Fraction(1)
        pred = factor * sum((prediction.layerwise["breakdown"][t] for t in terms if t not in free), Fraction(0))
        meas = _mean_field(report, cats, field_name, epochs)
        predicted[key] = as_number(pred)
        measured[key] = as_number(meas)
        if degenerate or pred == 0:
            ratios[key] = None
            verdicts[key] = "degenerate" if degenerate else ("pass" if meas == 0 else "fail")
            continue
        ratio = meas / pred
        ratios[key] = float(ratio)
        verdicts[key] = "pass" if Fraction(1) / tol <= ratio <= tol else "fail"
    exact = expected_ledger(strategy, params.n, params.nnz, params.layer_dims, params.P, params.c)
    tallies = {}
    for (cat, field_name), want in exact.items():
        got = _mean_field(report, (cat,), field_name, epochs)
        tallies[f"{cat}.{field_name}"] = {
            "expected": as_number(want),
            "measured": as_number(got),
            "verdict": "pass" if got == want else "fail",
        }
    ok = all(v != "fail" for v in verdicts.values()) and all(t["verdict"] == "pass" for t in tallies.values())
    return {
        "config": {
            "strategy": strategy,
            "n": params.n,
            "nnz": params.nnz,
            "layer_dims": list(params.layer_dims),
            "P": params.P,
            "c": params.c,
            "epochs": epochs,
        },
        "predicted": predicted,
        "measured": measured,
        "ratios": ratios,
        "verdicts": verdicts,
        "exact_tallies": tallies,
        "setup_words": None if setup_report is None else setup_report["world_totals"]["words"],
        "degenerate": degenerate,
        "singleton_terms": sorted(free),
        "pass": ok,
        "conventions": {
            "measure": "mean per-rank words per epoch",
            "mapping": {
                "+".join(t): {"categories": list(c), "field": fl, "scale": sc, "tolerance": float(tol)}
                for t, c, fl, sc, tol in CONVENTION_TABLE[strategy]
            },
            "lg": "ceil(log2 x)",
        },
    }


PRESETS = {
    "reddit": {"n": 232_965, "nnz": 114_848_857, "f": 602, "labels": 41},
    "amazon": {"n": 14_249_639, "nnz": 230_788_269, "f": 300, "labels": 24},
    "protein": {"n": 8_745_542, "nnz": 2_116_240_124, "f": 128, "labels": 256},
}
