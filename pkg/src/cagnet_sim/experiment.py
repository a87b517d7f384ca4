"""Experiment configuration, dataset assembly and the four front-end commands."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .cost_model import PRESETS, CostParams, as_number, compare_report, memory_footprints, predict, predict_2d_rect
from .dist import STRATEGIES, DistributedTrainer, ReplicaDivergenceError, grid_for
from .gnn_reference import init_glorot, train_serial
from .rng import PRNG_NAME, make_rng
from .sim_runtime import CommLedger, FaultSpec, ledger_report
from .sparse_core import build_dataset, generate_erdos_renyi, permute_random

SCHEMA = "cagnet-sim/1"
TOLERANCE = 1e-8
log = logging.getLogger("cagnet_sim")


@dataclass
class ExperimentConfig:
    strategy: str = "serial"
    ranks: int = 1
    repl: int | None = None
    block: int | None = None
    layers: tuple = (16, 16, 4)
    epochs: int = 5
    lr: float = 1.0
    # generated input
    n: int = 64
    degree: float = 8.0
    undirected: bool = False
    classes: int | None = None
    # file input
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    random_features: tuple | None = None
    seed_graph: int = 1
    seed_features: int = 2
    seed_weights: int = 3
    seed_perm: int = 4
    permute: bool = False
    scheduler: str = "threads"
    inject_fault: str | None = None

    def __post_init__(self):
        self.layers = tuple(int(d) for d in self.layers)
        if self.random_features is not None:
            self.random_features = tuple(int(x) for x in self.random_features)

    def validate(self) -> None:
        """Reject bad combinations before anything is allocated."""
        if self.strategy != "serial" and self.strategy not in STRATEGIES:
            raise ValueError(f"--strategy must be serial or one of {sorted(STRATEGIES)}, got {self.strategy!r}")
        if len(self.layers) < 2 or min(self.layers) < 1:
            raise ValueError(f"--layers needs at least two positive widths, got {list(self.layers)}")
        if self.epochs < 1:
            raise ValueError("--epochs must be at least 1")
        if self.strategy == "serial":
            if self.ranks != 1:
                raise ValueError("the serial strategy runs on one rank; drop --ranks or pick a distributed strategy")
            if self.repl not in (None, 1) or self.block is not None:
                raise ValueError("--repl and --block do not apply to the serial strategy")
        else:
            grid = grid_for(self.strategy, self.ranks, self.repl)
            if self.strategy == "1.5d" and (self.repl or 1) ** 2 > self.ranks:
                raise ValueError(f"1.5d needs c^2 <= P; got c={self.repl}, P={self.ranks}")
            if self.strategy == "3d":
                s = grid.dims[0]
                bad = [f for f in self.layers if f % s]
                if bad:
                    raise ValueError(f"3d on P={self.ranks} needs every layer width divisible by {s}; {bad} are not")
            if self.block is not None and self.strategy not in ("2d", "3d"):
                raise ValueError("--block applies to the 2d and 3d strategies only")
        classes = self.n_classes
        if not 1 <= classes <= self.layers[-1]:
            raise ValueError(f"--classes must lie in [1, {self.layers[-1]}] (the output width), got {classes}")
        if self.edges is None and (self.features or self.labels):
            raise ValueError("--features/--labels need --edges")
        if self.edges is not None and self.features is None and self.random_features is None:
            raise ValueError("file input needs --features or --random-features F SEED")
        if self.inject_fault is not None:
            parse_fault(self.inject_fault)

    @property
    def n_classes(self) -> int:
        return self.layers[-1] if self.classes is None else self.classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        if self.random_features is not None:
            d["random_features"] = list(self.random_features)
        return d


def parse_fault(text: str) -> FaultSpec:
    rank, sep, tag = text.partition(":")
    if not sep or not rank.isdigit() or not tag:
        raise ValueError(f"--inject-fault expects RANK:TAG, got {text!r}")
    return FaultSpec(int(rank), tag)


def load_dataset(cfg: ExperimentConfig):
    """Build the normalised dataset; returns ``(dataset, info)``."""
    if cfg.edges is None:
        raw = generate_erdos_renyi(cfg.n, cfg.degree, cfg.seed_graph, undirected=cfg.undirected)
        rng = make_rng(cfg.seed_features)
        features = rng.standard_normal((cfg.n, cfg.layers[0]))
        labels = rng.integers(0, cfg.n_classes, cfg.n)
        mask = np.ones(cfg.n, dtype=bool)
    else:
        raw = fio.read_edge_list(cfg.edges, undirected=cfg.undirected)
        if cfg.features is not None:
            features = fio.read_features(cfg.features)
        else:
            width, seed = cfg.random_features
            features = make_rng(seed).standard_normal((raw.n_rows, width))
        if features.shape[0] != raw.n_rows:
            raise ValueError(f"features have {features.shape[0]} rows but the graph has {raw.n_rows} vertices")
        if cfg.labels is not None:
            labels, mask = fio.read_labels(cfg.labels, raw.n_rows)
        else:
            labels = make_rng(cfg.seed_features).integers(0, cfg.n_classes, raw.n_rows)
            mask = np.ones(raw.n_rows, dtype=bool)
    if features.shape[1] != cfg.layers[0]:
        raise ValueError(f"features have width {features.shape[1]}; --layers must start with {features.shape[1]}")
    if mask.any() and labels[mask].max() >= cfg.layers[-1]:
        raise ValueError(f"labels reach {labels[mask].max()} but the output width is {cfg.layers[-1]}")
    ds = build_dataset(raw, features, labels, mask)
    perm = None
    if cfg.permute:
        ds, perm = permute_random(ds, cfg.seed_perm)
    info = {
        "n": ds.n,
        "raw_nnz": raw.nnz,
        "nnz": ds.adj.nnz,
        "symmetric": ds.symmetric,
        "n_train": int(ds.train_mask.sum()),
        "permuted": perm is not None,
    }
    return ds, info


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    ref = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    return diff / ref if ref > 0 else diff


def compare_runs(serial_records, dist_epochs) -> dict:
    """Largest relative Frobenius error per tensor over all epochs."""
    L = len(serial_records[0].weights) + 1
    errors: dict[str, float] = {"loss": 0.0, f"H^{L - 1}": 0.0}
    for l in range(L - 1):
        errors[f"Y^{l}"] = errors[f"W^{l}"] = 0.0
    for l in range(1, L):
        errors[f"G^{l}"] = 0.0
    for s, d in zip(serial_records, dist_epochs):
        errors["loss"] = max(errors["loss"], abs(d.loss - s.loss) / abs(s.loss) if s.loss else abs(d.loss))
        errors[f"H^{L - 1}"] = max(errors[f"H^{L - 1}"], rel_error(d.output, s.output))
        for l in range(L - 1):
            errors[f"Y^{l}"] = max(errors[f"Y^{l}"], rel_error(d.gradients[l], s.gradients[l]))
            errors[f"W^{l}"] = max(errors[f"W^{l}"], rel_error(d.weights[l], s.weights[l]))
        for l in range(1, L):
            errors[f"G^{l}"] = max(errors[f"G^{l}"], rel_error(d.grads_g[l], s.grads_g[l]))
    return errors


def _resident_words(state) -> int:
    seen, total = set(), 0
    for key, tile in state.tiles.items():
        if key.endswith("_panels"):  # views of tiles already counted
            continue
        for t in tile.values() if isinstance(tile, dict) else tile if isinstance(tile, list) else [tile]:
            if id(t) not in seen:
                seen.add(id(t))
                total += t.nnz
    arrays = [state.h0, *state.weights, *state.zs[1:], *state.hs[1:], *state.ys, *[g for g in state.gs if g is not None]]
    return total + sum(int(a.size) for a in arrays)


def _header(cfg: ExperimentConfig, kind: str) -> dict:
    return {
        "schema": SCHEMA,
        "kind": kind,
        "tool": {"name": "cagnet-sim", "version": __version__},
        "config": cfg.to_dict(),
        "conventions": {
            "prng": PRNG_NAME,
            "dtype": "float64",
            "reduction_order": "ascending rank",
            "relu_prime_at_zero": 0,
            "loss": "mean negative log-likelihood over the train set",
            "tolerance": TOLERANCE,
        },
    }


def _run_pair(cfg: ExperimentConfig, with_serial: bool):
    ds, info = load_dataset(cfg)
    model = init_glorot(cfg.layers, cfg.seed_weights, cfg.lr)
    serial = train_serial(ds, model, cfg.epochs, record=True)[2] if with_serial or cfg.strategy == "serial" else None
    if cfg.strategy == "serial":
        return ds, info, serial, None, None
    fault = parse_fault(cfg.inject_fault) if cfg.inject_fault else None
    trainer = DistributedTrainer(ds, model, cfg.strategy, cfg.ranks, cfg.repl, cfg.block, cfg.scheduler, fault)
    return ds, info, serial, trainer, trainer.train(cfg.epochs)


def cmd_train(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    ds, info, serial, trainer, epochs = _run_pair(cfg, with_serial=True)
    report = _header(cfg, "train")
    report["dataset"] = info
    if trainer is None:
        report["losses"] = [r.loss for r in serial]
        report["ledger"] = None
        report["verification"] = {"max_rel_error": 0.0, "errors": {}, "pass": True}
        report["memory"] = {"resident_words_per_rank": None}
        return report
    total = CommLedger(trainer.grid.size)
    for ep in epochs:
        total = total + ep.ledger
    ledger = ledger_report(total, trainer.grid)
    errors = compare_runs(serial, epochs)
    params = CostParams(n=ds.n, layer_dims=cfg.layers, P=cfg.ranks, nnz=ds.adj.nnz, c=cfg.repl or 1)
    report["losses"] = [ep.loss for ep in epochs]
    report["per_epoch_words"] = [ep.ledger.total_words() for ep in epochs]
    report["ledger"] = ledger
    report["setup_ledger"] = ledger_report(trainer.setup_ledger, trainer.grid)
    report["cost"] = compare_report(cfg.strategy, params, ledger, cfg.epochs, report["setup_ledger"])
    report["verification"] = {
        "max_rel_error": max(errors.values()),
        "errors": errors,
        "pass": max(errors.values()) < TOLERANCE,
    }
    report["memory"] = {
        "resident_words_per_rank": [_resident_words(st) for st in trainer.states],
        "pre_reduction_peak_words": {label: trainer.runtime.meter.peak(label) for label in trainer.runtime.meter.labels()},
        "model": {k: as_number(v) for k, v in memory_footprints(params).items()},
    }
    return report


def cmd_verify(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    if cfg.strategy == "serial":
        raise ValueError("verify compares a distributed strategy against serial; pick --strategy 1d, 1.5d, 2d or 3d")
    report = _header(cfg, "verify")
    try:
        _, info, serial, _, epochs = _run_pair(cfg, with_serial=True)
    except ReplicaDivergenceError as exc:
        report["verdict"] = {"pass": False, "failed": [exc.name], "reason": str(exc), "errors": {}}
        return report
    errors = compare_runs(serial, epochs)
    failed = sorted(name for name, err in errors.items() if not err < TOLERANCE)
    report["dataset"] = info
    report["verdict"] = {
        "pass": not failed,
        "failed": failed,
        "max_rel_error": max(errors.values()),
        "errors": errors,
        "tolerance": TOLERANCE,
    }
    return report


def cmd_gen(out_dir, n: int, degree: float, f: int, classes: int, seed_graph: int, seed_features: int, undirected: bool = False) -> dict:
    if classes < 1:
        raise ValueError("classes must be at least 1")
    out = fio.ensure_dir(out_dir)
    raw = generate_erdos_renyi(n, degree, seed_graph, undirected=undirected)
    rng = make_rng(seed_features)
    features = rng.standard_normal((n, f))
    labels = rng.integers(0, classes, n)
    paths = {"edges": out / "edges.txt", "features": out / "features.csv", "labels": out / "labels.csv"}
    fio.write_edge_list(paths["edges"], raw)
    fio.write_features(paths["features"], features)
    fio.write_labels(paths["labels"], labels)
    return {
        "schema": SCHEMA,
        "kind": "gen",
        "tool": {"name": "cagnet-sim", "version": __version__},
        "params": {
            "n": n,
            "degree": degree,
            "features": f,
            "classes": classes,
            "seed_graph": seed_graph,
            "seed_features": seed_features,
            "undirected": undirected,
            "prng": PRNG_NAME,
        },
        "files": {k: str(v) for k, v in paths.items()},
        "nnz": raw.nnz,
    }


@dataclass
class CostSweep:
    n: int
    nnz: int
    f: int
    L: int = 3
    ranks: list = field(default_factory=lambda: [4, 16, 64])
    repl: list = field(default_factory=lambda: [1, 2, 4])
    strategies: list = field(default_factory=lambda: ["1d", "1.5d", "2d", "3d"])
    rect: list = field(default_factory=list)
    preset: str | None = None

    @classmethod
    def from_preset(cls, name: str, **kw) -> "CostSweep":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[name]
        return cls(n=p["n"], nnz=p["nnz"], f=p["f"], preset=name, **kw)


def cmd_cost(sweep: CostSweep) -> dict:
    rows, skipped = [], []
    for strategy in sweep.strategies:
        for P in sweep.ranks:
            for c in sweep.repl if strategy == "1.5d" else [1]:
                try:
                    params = CostParams.uniform(sweep.n, sweep.f, sweep.L, P, nnz=sweep.nnz, c=c)
                    pred = predict(strategy, params)
                except ValueError as exc:
                    skipped.append({"strategy": strategy, "P": P, "c": c, "reason": str(exc)})
                    log.warning("skipping %s P=%d c=%d: %s", strategy, P, c, exc)
                    continue
                rows.append({"strategy": strategy, "P": P, "c": c, **pred.to_dict(), "memory": {k: as_number(v) for k, v in memory_footprints(params).items()}})
    for pr, pc in sweep.rect:
        try:
            params = CostParams.uniform(sweep.n, sweep.f, sweep.L, pr * pc, nnz=sweep.nnz, rows=pr, cols=pc)
            rows.append({"strategy": "2d-rect", "P": pr * pc, "c": 1, "grid": [pr, pc], **predict_2d_rect(params).to_dict()})
        except ValueError as exc:
            skipped.append({"strategy": "2d-rect", "grid": [pr, pc], "reason": str(exc)})
            log.warning("skipping rect %dx%d: %s", pr, pc, exc)
    return {
        "schema": SCHEMA,
        "kind": "cost",
        "tool": {"name": "cagnet-sim", "version": __version__},
        "params": {"n": sweep.n, "nnz": sweep.nnz, "f": sweep.f, "L": sweep.L, "preset": sweep.preset},
        "conventions": {"lg": "ceil(log2 x)", "words": "closed form with average width f and L layers"},
        "rows": rows,
        "skipped": skipped,
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=_json_default)


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_report(report: dict, path) -> None:
    Path(path).write_text(dumps(report) + "\n")


def write_epoch_csv(report: dict, path) -> None:
    """Lossy per-epoch projection of a train report."""
    words = report.get("per_epoch_words") or [0] * len(report["losses"])
    lines = ["epoch,loss,words"] + [f"{i + 1},{loss!r},{w}" for i, (loss, w) in enumerate(zip(report["losses"], words))]
    Path(path).write_text("\n".join(lines) + "\n")


def write_cost_csv(report: dict, path) -> None:
    lines = ["strategy,P,c,messages,words"] + [f"{r['strategy']},{r['P']},{r['c']},{r['messages']},{r['words']}" for r in report["rows"]]
    Path(path).write_text("\n".join(lines) + "\n")
