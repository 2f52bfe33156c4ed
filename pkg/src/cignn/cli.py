"""Command-line front end: build-graph, synth, train, evaluate, ablate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    CIGNNForecaster,
    HistoricalAverageForecaster,
    VARForecaster,
    ablate_fusion,
    default_period,
    evaluate,
)
from .data import chronological_split, load_collection, make_windows, synthesize_coupled, write_collection
from .errors import CignnError, ConfigError
from .graphs import adjacency_summary, load_adjacency_csv, save_adjacency_csv, write_summary
from .model import check_compatible, load_checkpoint, save_checkpoint
from .training import GraphConfig, TrainConfig, build_adjacencies, config_dict, train

logger = logging.getLogger("cignn")


def _add_graph_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--mode", choices=("spatial", "relational"), default="relational")
    p.add_argument("--sigma", type=float, default=None, help="Gaussian kernel width (default: std of distances)")
    p.add_argument("--kappa", type=float, default=None, help="distance cutoff (default: std of distances)")
    p.add_argument("--dcca-window", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.0, help="drop relational weights below this value")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _add_graph_flags(p)
    p.add_argument("--adjacency-dir", type=Path, default=None, help="reuse adjacency_<graph>.csv files")
    p.add_argument("--window", type=int, default=6)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--cheb-order", type=int, default=1)
    p.add_argument("--neurons", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--decay", type=float, default=0.1)
    p.add_argument("--decay-every", type=int, default=10)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--robust", action="store_true", help="clip gradients by global norm")
    p.add_argument("--clip-norm", type=float, default=5.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cignn", description="Context-integrated graph forecasting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="write adjacency CSVs and a summary")
    _add_graph_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth", help="write a synthetic coupled dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graphs", type=int, default=2)
    p.add_argument("--nodes", type=int, default=4)
    p.add_argument("--length", type=int, default=200)
    p.add_argument("--coupling", type=float, default=0.8)
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--smoothness", type=float, default=3.0)
    p.add_argument("--period", type=int, default=24)
    p.add_argument("--interval", type=int, default=3600)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test segment")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--baselines", action="store_true", help="also score HA and VAR")
    p.add_argument("--var-lag", type=int, default=None, help="VAR order (default: the model's window)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train with and without fusion and compare")
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def input_hashes(manifest: Path) -> dict[str, str]:
    """Hashes of the manifest and every file it references, keyed by relative path."""
    out = {manifest.name: _sha256(manifest)}
    try:
        doc = json.loads(manifest.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return out
    for g in doc.get("graphs", []):
        paths = [f.get("path") for f in g.get("files", [])] + [g.get("coordinates-path")]
        for rel in filter(None, paths):
            f = manifest.parent / rel
            if f.exists():
                out[rel] = _sha256(f)
    return out


def versions() -> dict[str, str]:
    return {"cignn": __version__, "python": platform.python_version(), "numpy": np.__version__}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _graph_config(args) -> GraphConfig:
    return GraphConfig(args.mode, args.sigma, args.kappa, args.dcca_window, args.threshold)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        decay=args.decay,
        decay_every=args.decay_every,
        max_epochs=args.epochs,
        patience=args.patience,
        batch_size=args.batch,
        seed=args.seed,
        window=args.window,
        horizon=args.horizon,
        cheb_order=args.cheb_order,
        hidden=args.neurons,
        fusion=not args.no_fusion,
        mode="robust" if args.robust else "standard",
        clip_norm=args.clip_norm,
    )


def _load_adjacencies(directory: Path, collection):
    out = []
    for g in collection.graphs:
        path = directory / f"adjacency_{g.graph_id}.csv"
        if not path.exists():
            raise ConfigError(f"adjacency file not found: {path}")
        out.append(load_adjacency_csv(path))
    return out


def _run_metadata(args, command: str, config: TrainConfig | None, graph_config: GraphConfig | None) -> dict:
    doc = {
        "command": command,
        "versions": versions(),
        "inputs": input_hashes(args.manifest),
        "graph_config": asdict(graph_config) if graph_config else None,
        "train_config": config_dict(config) if config else None,
        "seed": config.seed if config else None,
    }
    if getattr(args, "adjacency_dir", None):
        doc["adjacency_inputs"] = {p.name: _sha256(p) for p in sorted(args.adjacency_dir.glob("adjacency_*.csv"))}
    return doc


def cmd_build_graph(args) -> int:
    collection = load_collection(args.manifest)
    gc = _graph_config(args)
    split = chronological_split(collection)
    adjs = build_adjacencies(split.train if gc.mode == "relational" else collection, gc)
    args.out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for spec, a in zip(collection.graphs, adjs):
        save_adjacency_csv(args.out / f"adjacency_{spec.graph_id}.csv", a)
        summaries[spec.graph_id] = adjacency_summary(a)
    write_summary(args.out / "graph_summary.json", summaries)
    _write_json(args.out / "metadata.json", _run_metadata(args, "build-graph", None, gc))
    for gid, s in summaries.items():
        print(f"{gid}: {s['n']} nodes, {s['edges']} edges, eigenvalues [{s['laplacian_eig_min']:.4f}, "
              f"{s['laplacian_eig_max']:.4f}]")
    return 0


def cmd_synth(args) -> int:
    collection = synthesize_coupled(
        args.seed,
        n_graphs=args.graphs,
        nodes_per_graph=args.nodes,
        length=args.length,
        coupling=args.coupling,
        period=args.period,
        lag=args.lag,
        noise=args.noise,
        smoothness=args.smoothness,
        interval_seconds=args.interval,
    )
    path = write_collection(collection, args.out)
    print(path)
    return 0


def cmd_train(args) -> int:
    collection = load_collection(args.manifest)
    config, gc = _train_config(args), _graph_config(args)
    adjs = _load_adjacencies(args.adjacency_dir, collection) if args.adjacency_dir else None
    result = train(collection, config, gc, adjs)
    args.out.mkdir(parents=True, exist_ok=True)
    meta = _run_metadata(args, "train", config, gc)
    meta["result"] = result.log.summary()
    save_checkpoint(args.out / "checkpoint.json", result.model, result.stats, meta)
    result.log.to_csv(args.out / "train_log.csv")
    result.log.to_csv(args.out / "train_log_timed.csv", include_time=True)
    _write_json(args.out / "metadata.json", meta)
    print(f"best epoch {result.log.best_epoch}, {result.log.stop_reason}")
    return 0


def cmd_evaluate(args) -> int:
    model, stats, meta = load_checkpoint(args.checkpoint)
    collection = load_collection(args.manifest)
    check_compatible(model, collection.graphs)
    if stats is None:
        raise ConfigError(f"{args.checkpoint}: checkpoint has no normalization statistics")
    cfg = model.config
    horizon = args.horizon or cfg.horizon
    if horizon != cfg.horizon:
        raise ConfigError(f"checkpoint forecasts {cfg.horizon} steps; --horizon {horizon} requested")
    split = chronological_split(collection, window=cfg.window, horizon=cfg.horizon)
    samples = make_windows(split.test, cfg.window, cfg.horizon)
    graphs = model.graphs
    reports = [evaluate(CIGNNForecaster(model, stats), samples, graphs, horizon, meta.get("train_config"))]
    if args.baselines:
        lag = args.var_lag or cfg.window
        reports.append(evaluate(VARForecaster.fit(split.train, lag, horizon), samples, graphs, horizon,
                                {"lag": lag}))
        period = default_period(collection)
        reports.append(evaluate(HistoricalAverageForecaster(collection, period), samples, graphs, 1,
                                {"period": period, "lookback": 4}))
    args.out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        r.to_csv(args.out / f"report_{r.model.lower()}.csv")
        print(r.table())
        print()
    doc = {
        "command": "evaluate",
        "versions": versions(),
        "inputs": input_hashes(args.manifest),
        "checkpoint": _sha256(args.checkpoint),
        "horizon_average_mae": {r.model: r.horizon_average() for r in reports},
    }
    _write_json(args.out / "metadata.json", doc)
    return 0


def cmd_ablate(args) -> int:
    collection = load_collection(args.manifest)
    config, gc = _train_config(args), _graph_config(args)
    result = ablate_fusion(collection, config, gc, args.out)
    meta = _run_metadata(args, "ablate", config, gc)
    meta["horizon_average_mae"] = {k: r.horizon_average() for k, r in result.reports.items()}
    _write_json(args.out / "metadata.json", meta)
    for r in result.reports.values():
        print(r.table())
        print()
    return 0


COMMANDS = {
    "build-graph": cmd_build_graph,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _thread_limit():
    raw = os.environ.get("CIGNN_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CIGNN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CIGNN_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _report_error(exc: CignnError, out: Path | None) -> None:
    doc = {"error": exc.kind, "exit_code": exc.exit_code, "message": str(exc), "type": type(exc).__name__}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", doc)
        except OSError:
            pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        limiter = _thread_limit()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except CignnError as exc:
        _report_error(exc, getattr(args, "out", None))
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
