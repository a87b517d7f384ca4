"""Command-line front end: ``cagnet-sim {gen,train,verify,cost}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .experiment import (
    CostSweep,
    ExperimentConfig,
    cmd_cost,
    cmd_gen,
    cmd_train,
    cmd_verify,
    dumps,
    write_cost_csv,
    write_epoch_csv,
    write_report,
)
from .sim_runtime import SCHEDULERS


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _grid_list(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        r, sep, c = item.strip().partition("x")
        if not sep or not r.isdigit() or not c.isdigit():
            raise argparse.ArgumentTypeError(f"expected grids like 2x8,4x4; got {text!r}")
        out.append((int(r), int(c)))
    return out


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=["serial", "1d", "1.5d", "2d", "3d"], default="serial")
    p.add_argument("--ranks", "-P", type=int, default=1, help="number of simulated ranks")
    p.add_argument("--repl", "-c", type=int, default=None, help="1.5d replication factor")
    p.add_argument("--block", "-b", type=int, default=None, help="SUMMA panel width (2d/3d)")
    p.add_argument("--layers", type=_int_list, default=[16, 16, 4], help="feature widths, e.g. 16,16,4")
    p.add_argument("--epochs", "-E", type=int, default=5)
    p.add_argument("--lr", type=float, default=1.0, help="learning rate")
    g = p.add_argument_group("generated input")
    g.add_argument("--n", type=int, default=64, help="vertices")
    g.add_argument("--degree", type=float, default=8.0, help="average degree")
    g.add_argument("--classes", type=int, default=None, help="label classes (default: output width)")
    g.add_argument("--undirected", action="store_true")
    f = p.add_argument_group("file input")
    f.add_argument("--edges", help="edge list file")
    f.add_argument("--features", help="features CSV")
    f.add_argument("--labels", help="labels CSV (vertex,label)")
    f.add_argument("--random-features", nargs=2, type=int, metavar=("F", "SEED"))
    s = p.add_argument_group("seeds")
    s.add_argument("--seed-graph", type=int, default=1)
    s.add_argument("--seed-features", type=int, default=2)
    s.add_argument("--seed-weights", type=int, default=3)
    s.add_argument("--seed-perm", type=int, default=4)
    p.add_argument("--permute", action="store_true", help="randomly relabel vertices before training")
    p.add_argument("--scheduler", choices=SCHEDULERS, default="threads")
    p.add_argument("--inject-fault", metavar="RANK:TAG", help=argparse.SUPPRESS)
    p.add_argument("--out", help="write the JSON report here instead of stdout")


def _config(args) -> ExperimentConfig:
    return ExperimentConfig(
        strategy=args.strategy,
        ranks=args.ranks,
        repl=args.repl,
        block=args.block,
        layers=tuple(args.layers),
        epochs=args.epochs,
        lr=args.lr,
        n=args.n,
        degree=args.degree,
        undirected=args.undirected,
        classes=args.classes,
        edges=args.edges,
        features=args.features,
        labels=args.labels,
        random_features=args.random_features,
        seed_graph=args.seed_graph,
        seed_features=args.seed_features,
        seed_weights=args.seed_weights,
        seed_perm=args.seed_perm,
        permute=args.permute,
        scheduler=args.scheduler,
        inject_fault=args.inject_fault,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cagnet-sim", description="Simulated distributed GCN training.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a random graph, features and labels")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--n", type=int, default=64)
    gen.add_argument("--degree", type=float, default=8.0)
    gen.add_argument("--features", "-f", type=int, default=16)
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--seed-graph", type=int, default=1)
    gen.add_argument("--seed-features", type=int, default=2)
    gen.add_argument("--undirected", action="store_true")

    train = sub.add_parser("train", help="train and report loss, traffic and cost reconciliation")
    _add_experiment_args(train)
    train.add_argument("--csv", help="also write per-epoch loss and words as CSV")

    verify = sub.add_parser("verify", help="compare a distributed run with the serial oracle")
    _add_experiment_args(verify)

    cost = sub.add_parser("cost", help="evaluate the analytical cost model over a sweep")
    cost.add_argument("--preset", choices=["reddit", "amazon", "protein"])
    cost.add_argument("--n", type=int)
    cost.add_argument("--nnz", type=int)
    cost.add_argument("--f", type=int, help="average feature width")
    cost.add_argument("--L", type=int, default=3, help="layer count")
    cost.add_argument("--ranks", type=_int_list, default=[4, 16, 64], help="sweep of P")
    cost.add_argument("--repl", type=_int_list, default=[1, 2, 4], help="sweep of c for 1.5d")
    cost.add_argument("--strategies", default="1d,1.5d,2d,3d")
    cost.add_argument("--rect", type=_grid_list, default=[], help="rectangular 2D grids, e.g. 2x8,8x2")
    cost.add_argument("--csv", help="also write a CSV table")
    cost.add_argument("--out")
    return parser


def _emit(report: dict, out: str | None) -> None:
    if out:
        write_report(report, out)
    else:
        sys.stdout.write(dumps(report) + "\n")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            report = cmd_gen(args.out, args.n, args.degree, args.features, args.classes, args.seed_graph, args.seed_features, args.undirected)
            _emit(report, None)
            return 0
        if args.command == "train":
            report = cmd_train(_config(args))
            if args.csv:
                write_epoch_csv(report, args.csv)
            _emit(report, args.out)
            return 0 if report["verification"]["pass"] and (report.get("cost") is None or report["cost"]["pass"]) else 1
        if args.command == "verify":
            report = cmd_verify(_config(args))
            _emit(report, args.out)
            return 0 if report["verdict"]["pass"] else 1
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
        kw = dict(L=args.L, ranks=args.ranks, repl=args.repl, strategies=strategies, rect=args.rect)
        if args.preset:
            sweep = CostSweep.from_preset(args.preset, **kw)
            for name in ("n", "nnz", "f"):
                if getattr(args, name) is not None:
                    setattr(sweep, name, getattr(args, name))
        else:
            missing = [f"--{k}" for k in ("n", "nnz", "f") if getattr(args, k) is None]
            if missing:
                raise ValueError(f"cost needs --preset or all of --n --nnz --f; missing {' '.join(missing)}")
            sweep = CostSweep(n=args.n, nnz=args.nnz, f=args.f, **kw)
        report = cmd_cost(sweep)
        if args.csv:
            write_cost_csv(report, args.csv)
        _emit(report, args.out)
        return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
