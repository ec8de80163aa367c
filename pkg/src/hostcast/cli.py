"""Command-line interface: preprocess, train, eval, sweep, synth.

Every command is deterministic given identical inputs and seed, and writes
only under its ``--output-dir``. Exit codes: 0 success, 2 input or config
error, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from multiprocessing import get_context

from .errors import HostcastError, InputError, NumericalError
from .cells import load_checkpoint, save_checkpoint
from .graph import load_edge_csv, with_order
from .pipeline import (
    bin_times,
    build_dataset,
    filter_hosts,
    ingest,
    load_dataset,
    save_dataset,
    sliding_windows,
    split,
)
from .synth import SynthConfig, bayes_rate, generate
from .training import TrainConfig, evaluate, train, write_metrics_csv

__all__ = ["main", "RunConfig"]


@dataclass
class RunConfig:
    """JSON-file run configuration; flags override file values.

    Unknown keys in the file are rejected so a silent typo cannot change a
    hyperparameter back to its default.
    """

    model: str = "step"
    s: int = 10
    k_merge: int = 3
    hidden_dim: int = 128
    k_cheb: int = 2
    lr: float = 1e-3
    weight_decay: float = 1.5e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    train_fraction: float = 0.8
    exclude_zero_event: bool = False
    dataset_dir: str | None = None
    output_dir: str | None = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise InputError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InputError(
                f"{path}: unknown config keys {sorted(unknown)}; known keys are {sorted(known)}"
            )
        return cls(**raw)

    def override(self, args: argparse.Namespace) -> "RunConfig":
        for f in fields(self):
            value = getattr(args, f.name, None)
            if value is not None:
                setattr(self, f.name, value)
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            variant=self.model,
            s=self.s,
            d_h=self.hidden_dim,
            K=self.k_cheb,
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            train_fraction=self.train_fraction,
            exclude_zero_event=self.exclude_zero_event,
        )


def _resolve_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.override(args)
    if not cfg.dataset_dir:
        raise InputError("a dataset directory is required (--dataset-dir or config)")
    if not cfg.output_dir:
        raise InputError("an output directory is required (--output-dir or config)")
    return cfg


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--model", choices=["step", "lstm", "convlstm"])
    p.add_argument("--s", type=int, help="sliding window length")
    p.add_argument("--k-merge", type=int, dest="k_merge")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--k-cheb", type=int, dest="k_cheb")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument(
        "--exclude-zero-event",
        action=argparse.BooleanOptionalAction,
        dest="exclude_zero_event",
        default=None,
        help="drop no-event targets from the accuracy count",
    )
    p.add_argument("--dataset-dir", dest="dataset_dir")
    p.add_argument("--output-dir", dest="output_dir")


def cmd_preprocess(args: argparse.Namespace) -> int:
    log = ingest(args.events)
    if args.time_bin > 1:
        log = bin_times(log, args.time_bin)
    log = filter_hosts(log, args.min_occurrences)
    edges = load_edge_csv(args.edges) if args.edges else None
    dataset = build_dataset(log, args.k_merge, edge_source=edges)
    save_dataset(dataset, args.output_dir)
    print(f"n={dataset.n} d={dataset.d} T={dataset.T}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_run_config(args)
    tc = cfg.train_config()
    dataset = load_dataset(cfg.dataset_dir, cheb_order=tc.K)
    params, metrics = train(dataset, tc)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_checkpoint(os.path.join(cfg.output_dir, "model.ckpt"), params, list(dataset.vocabulary))
    write_metrics_csv(os.path.join(cfg.output_dir, "metrics.csv"), metrics)
    print(f"test_acc={metrics[-1].test_acc:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    params, vocabulary = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset_dir, cheb_order=params.K)
    if list(dataset.vocabulary) != vocabulary:
        raise InputError("checkpoint and dataset vocabularies do not match")
    tc = TrainConfig(
        variant=params.variant,
        s=args.s,
        d_h=params.d_h,
        K=params.K,
        train_fraction=args.train_fraction,
        exclude_zero_event=bool(args.exclude_zero_event),
    )
    windows = sliding_windows(dataset, tc.s)
    _, test_batch = split(windows, tc.train_fraction)
    graph = with_order(dataset.graph, params.K) if params.variant == "step" else None
    acc = evaluate(params, graph, test_batch, tc)
    print(f"test_acc={acc:.4f}")
    return 0


def _sweep_cell(job: tuple[str, str, int, dict]) -> tuple[str, int, float]:
    """Train one (model, window length) cell.

    Cells always compute with one BLAS thread so serial and parallel sweeps
    produce byte-identical results.
    """
    dataset_dir, model, s, base = job
    tc = TrainConfig(variant=model, s=s, **base)
    dataset = load_dataset(dataset_dir, cheb_order=tc.K)
    try:
        import threadpoolctl

        with threadpoolctl.threadpool_limits(1):
            _, metrics = train(dataset, tc)
    except ImportError:
        _, metrics = train(dataset, tc)
    return model, s, metrics[-1].test_acc


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _resolve_run_config(args)
    s_values = [int(v) for v in args.s_values.split(",")] if args.s_values else [5, 10, 15, 20]
    models = args.models.split(",") if args.models else ["step", "lstm", "convlstm"]
    for model in models:
        if model not in ("step", "lstm", "convlstm"):
            raise InputError(f"unknown model {model!r} in --models")
    base = dict(
        d_h=cfg.hidden_dim,
        K=cfg.k_cheb,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        train_fraction=cfg.train_fraction,
        exclude_zero_event=cfg.exclude_zero_event,
    )
    jobs = [
        (cfg.dataset_dir, model, s, base)
        for model in sorted(models)
        for s in sorted(s_values)
    ]
    if args.workers > 1:
        with get_context("fork").Pool(args.workers) as pool:
            results = pool.map(_sweep_cell, jobs)
    else:
        results = [_sweep_cell(job) for job in jobs]
    results.sort(key=lambda r: (r[0], r[1]))
    os.makedirs(cfg.output_dir, exist_ok=True)
    out_path = os.path.join(cfg.output_dir, "sweep.csv")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model,s,test_acc\n")
        for model, s, acc in results:
            fh.write(f"{model},{s},{acc:.6f}\n")
    for model, s, acc in results:
        print(f"{model} s={s} test_acc={acc:.4f}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        n=args.n,
        topology=args.topology,
        p=args.p,
        d=args.classes,
        T=args.steps,
        coupling=args.coupling,
        noise=args.noise,
        seed=args.seed,
    )
    dataset = generate(cfg)
    save_dataset(dataset, args.output_dir)
    print(
        f"n={dataset.n} d={dataset.d} T={dataset.T} bayes_rate={bayes_rate(cfg):.4f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hostcast",
        description="Spatial-temporal prediction of per-host security events",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="events CSV to a processed dataset directory")
    p.add_argument("--events", required=True, help="CSV with header time,src,dst,event_id")
    p.add_argument("--edges", help="optional edge CSV with header src,dst")
    p.add_argument("--k-merge", type=int, default=3, dest="k_merge")
    p.add_argument("--min-occurrences", type=int, default=10, dest="min_occurrences")
    p.add_argument("--time-bin", type=int, default=1, dest="time_bin")
    p.add_argument("--output-dir", required=True, dest="output_dir")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train one model on a processed dataset")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-dir", required=True, dest="dataset_dir")
    p.add_argument("--s", type=int, default=10)
    p.add_argument("--train-fraction", type=float, default=0.8, dest="train_fraction")
    p.add_argument(
        "--exclude-zero-event",
        action=argparse.BooleanOptionalAction,
        dest="exclude_zero_event",
        default=False,
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="train every (model, window length) cell")
    _add_run_flags(p)
    p.add_argument("--s-values", dest="s_values", help="comma list, default 5,10,15,20")
    p.add_argument("--models", help="comma list, default step,lstm,convlstm")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic spatio-temporal dataset")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--topology", choices=["ring", "grid", "erdos-renyi"], default="ring")
    p.add_argument("--p", type=float, default=0.15, help="edge probability for erdos-renyi")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--coupling", type=float, default=0.9)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", required=True, dest="output_dir")
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (HostcastError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
