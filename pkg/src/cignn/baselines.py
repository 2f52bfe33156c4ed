"""Reference forecasters, per-horizon scoring and the fusion ablation."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import (
    GraphCollection,
    GraphSpec,
    NormStats,
    WindowedSample,
    chronological_split,
    make_windows,
    stack_windows,
)
from .errors import CignnWarning, ConfigError, InputError, InsufficientDataError
from .model import CIGNN
from .training import GraphConfig, TrainConfig, TrainLog, build_adjacencies, config_dict, train

logger = logging.getLogger(__name__)

RIDGE = 1e-6
WEEK_SECONDS = 7 * 24 * 3600


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise InputError(f"prediction shape {p.shape} does not match actual shape {a.shape}")
    if a.size == 0:
        raise InputError("cannot score an empty evaluation set")
    return p, a


def mae(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.mean(np.abs(p - a)))


def rmse(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def historical_average(history, t: int, period: int, lookback: int = 4) -> np.ndarray:
    """Mean of ``history`` at steps ``t - k * period`` for ``k = 1..lookback``.

    Only steps that exist (index >= 0) are used; at least one is required.
    """
    h = np.asarray(history, dtype=np.float64)
    if period < 1 or lookback < 1:
        raise InputError(f"period and lookback must be >= 1, got {period}, {lookback}")
    idx = [t - k * period for k in range(1, lookback + 1) if 0 <= t - k * period < len(h)]
    if not idx:
        raise InsufficientDataError(f"no observation one period ({period} steps) before step {t}")
    return h[idx].mean(axis=0)


def default_period(collection: GraphCollection) -> int:
    """Season length in steps: the manifest's value, else one week."""
    if collection.period_steps:
        return int(collection.period_steps)
    steps, rem = divmod(WEEK_SECONDS, collection.interval_seconds)
    if rem:
        raise ConfigError(
            f"interval of {collection.interval_seconds} s does not divide a week; set period-steps in the manifest"
        )
    return steps


@dataclass(frozen=True)
class VARModel:
    """``x_t = c + sum_k A_k x_{t-k}``; ``coefs[k-1]`` is ``A_k``."""

    intercept: np.ndarray  # (d,)
    coefs: np.ndarray  # (p, d, d)

    @property
    def lag(self) -> int:
        return self.coefs.shape[0]

    @property
    def dim(self) -> int:
        return self.intercept.shape[0]

    def forecast(self, history, steps: int) -> np.ndarray:
        return var_forecast(self, history, steps)


def _lag_design(x: np.ndarray, lag: int) -> np.ndarray:
    t = x.shape[0]
    cols = [np.ones((t - lag, 1))] + [x[lag - k : t - k] for k in range(1, lag + 1)]
    return np.hstack(cols)


def var_fit(series, lag: int) -> VARModel:
    """Least-squares VAR(lag) fit on a ``(T, d)`` array.

    A rank-deficient design falls back to a ridge solve that leaves the
    intercept unpenalized, so constant series still fit exactly.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InputError(f"VAR input must be (T, d), got {x.shape}")
    if lag < 1:
        raise InputError(f"VAR lag must be >= 1, got {lag}")
    t, d = x.shape
    if t <= d * lag + 1:
        raise InsufficientDataError(f"VAR({lag}) on {d} series needs more than {d * lag + 1} steps, got {t}")
    design = _lag_design(x, lag)
    y = x[lag:]
    if np.linalg.matrix_rank(design) < design.shape[1]:
        warnings.warn("singular VAR design matrix; using ridge-regularized solve", CignnWarning, stacklevel=2)
        penalty = np.full(design.shape[1], RIDGE)
        penalty[0] = 0.0
        beta = np.linalg.solve(design.T @ design + np.diag(penalty), design.T @ y)
    else:
        beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    coefs = beta[1:].reshape(lag, d, d).transpose(0, 2, 1)
    return VARModel(beta[0].copy(), np.ascontiguousarray(coefs))


def var_forecast(model: VARModel, history, steps: int) -> np.ndarray:
    """Iterated forecasts; ``history`` is ``(T, d)`` or batched ``(B, T, d)``."""
    h = np.asarray(history, dtype=np.float64)
    single = h.ndim == 2
    if single:
        h = h[None]
    if h.shape[-1] != model.dim or h.shape[1] < model.lag:
        raise InputError(f"history {h.shape[1:]} too short or wrong width for VAR({model.lag}) of dim {model.dim}")
    buf = [h[:, -k] for k in range(model.lag, 0, -1)]
    out = []
    for _ in range(steps):
        nxt = model.intercept + sum(buf[-k] @ model.coefs[k - 1].T for k in range(1, model.lag + 1))
        out.append(nxt)
        buf.append(nxt)
    res = np.stack(out, axis=1)
    return res[0] if single else res


class Forecaster(Protocol):
    name: str
    horizon: int

    def predict(self, samples: Sequence[WindowedSample]) -> list[np.ndarray]:
        """Per-graph ``(B, horizon, N, P)`` predictions on the raw scale."""


@dataclass
class CIGNNForecaster:
    model: CIGNN
    stats: NormStats
    name: str = "CIGNN"
    batch_size: int = 256

    @property
    def horizon(self) -> int:
        return self.model.config.horizon

    def predict(self, samples):
        chunks = []
        for lo in range(0, len(samples), self.batch_size):
            x, _ = stack_windows(samples[lo : lo + self.batch_size])
            x = [self.stats.transform(v, g) for g, v in enumerate(x)]
            chunks.append(self.model.predict(x))
        return [self.stats.inverse(np.concatenate([c[g] for c in chunks]), g) for g in range(len(chunks[0]))]


@dataclass
class HistoricalAverageForecaster:
    """One-step seasonal average drawn from the full raw collection."""

    collection: GraphCollection
    period: int
    lookback: int = 4
    name: str = "HA"
    horizon: int = 1

    def predict(self, samples):
        out = []
        for g in range(self.collection.n_graphs):
            vals = self.collection.values(g)
            preds = [historical_average(vals, s.origin_index + 1 - self.collection.offset, self.period, self.lookback)
                     for s in samples]
            out.append(np.stack(preds)[:, None])
        return out


@dataclass
class VARForecaster:
    """One VAR per graph over its flattened node-feature vector."""

    models: list[VARModel]
    horizon: int
    name: str = "VAR"

    @classmethod
    def fit(cls, train_segment: GraphCollection, lag: int, horizon: int) -> VARForecaster:
        models = []
        for g in range(train_segment.n_graphs):
            v = train_segment.values(g)
            models.append(var_fit(v.reshape(v.shape[0], -1), lag))
        return cls(models, horizon)

    def predict(self, samples):
        x, _ = stack_windows(samples)
        out = []
        for m, v in zip(self.models, x):
            b, _, n, p = v.shape
            pred = var_forecast(m, v.reshape(b, v.shape[1], n * p), self.horizon)
            out.append(pred.reshape(b, self.horizon, n, p))
        return out


@dataclass(frozen=True)
class ReportRow:
    graph_id: str
    role: str
    horizon: int
    mae: float
    rmse: float


@dataclass
class ForecastReport:
    model: str
    rows: list[ReportRow]
    config: dict = field(default_factory=dict)

    def cell(self, graph_id: str, horizon: int) -> ReportRow:
        return next(r for r in self.rows if r.graph_id == graph_id and r.horizon == horizon)

    @property
    def target_id(self) -> str:
        return next(r.graph_id for r in self.rows if r.role == "target")

    def horizon_average(self, graph_id: str | None = None, metric: str = "mae") -> float:
        gid = graph_id or self.target_id
        return float(np.mean([getattr(r, metric) for r in self.rows if r.graph_id == gid]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "graph", "role", "horizon", "mae", "rmse"])
            for r in self.rows:
                w.writerow([self.model, r.graph_id, r.role, r.horizon, repr(r.mae), repr(r.rmse)])

    def table(self) -> str:
        lines = [f"{self.model}", f"{'graph':<16}{'role':<9}{'h':>3}{'MAE':>12}{'RMSE':>12}"]
        for r in self.rows:
            lines.append(f"{r.graph_id:<16}{r.role:<9}{r.horizon:>3}{r.mae:>12.4f}{r.rmse:>12.4f}")
        return "\n".join(lines)


def evaluate(
    predictor: Forecaster,
    samples: Sequence[WindowedSample],
    graphs: Sequence[GraphSpec],
    horizon: int | None = None,
    config: dict | None = None,
) -> ForecastReport:
    """Per-graph, per-horizon MAE and RMSE on raw-scale windows."""
    if not samples:
        raise InputError("evaluation needs at least one window")
    horizon = predictor.horizon if horizon is None else horizon
    if horizon > predictor.horizon or horizon < 1:
        raise ConfigError(f"{predictor.name} forecasts {predictor.horizon} steps; {horizon} requested")
    if samples[0].targets[0].shape[0] < horizon:
        raise ConfigError(f"windows carry {samples[0].targets[0].shape[0]} target steps; {horizon} requested")
    preds = predictor.predict(samples)
    _, actual = stack_windows(samples)
    rows = []
    for spec, p, a in zip(graphs, preds, actual):
        for h in range(horizon):
            rows.append(ReportRow(spec.graph_id, spec.role, h + 1, mae(p[:, h], a[:, h]), rmse(p[:, h], a[:, h])))
    rows.sort(key=lambda r: (r.role != "target", r.graph_id, r.horizon))
    return ForecastReport(predictor.name, rows, dict(config or {}))


@dataclass
class AblationResult:
    logs: dict[str, TrainLog]
    reports: dict[str, ForecastReport]
    models: dict[str, CIGNN]
    initial_params: dict[str, dict]


def plot_losses(path, logs: dict[str, TrainLog]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, log in logs.items():
        ep = [e.epoch for e in log.epochs]
        ax.plot(ep, [e.train_mae for e in log.epochs], label=f"{label} train")
        ax.plot(ep, [e.val_mae for e in log.epochs], linestyle="--", label=f"{label} validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MAE (normalized)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def ablate_fusion(
    collection: GraphCollection,
    config: TrainConfig = TrainConfig(),
    graph_config: GraphConfig = GraphConfig(),
    out_dir=None,
) -> AblationResult:
    """Train with and without the cross-graph fusion term from one seed and compare."""
    if collection.n_graphs < 2:
        raise ConfigError("fusion ablation needs at least two graphs; with one graph there is nothing to fuse")
    split = chronological_split(collection, window=config.window, horizon=config.horizon)
    adjacencies = build_adjacencies(split.train, graph_config)
    raw_test = make_windows(split.test, config.window, config.horizon)
    logs, reports, models, inits = {}, {}, {}, {}
    for label, flag in (("fusion_on", True), ("fusion_off", False)):
        cfg = replace(config, fusion=flag)
        res = train(collection, cfg, graph_config, adjacencies)
        fc = CIGNNForecaster(res.model, res.stats, name=f"CIGNN-{label}")
        logs[label] = res.log
        reports[label] = evaluate(fc, raw_test, res.data.graphs, config=config_dict(cfg))
        models[label] = res.model
        inits[label] = res.initial_params
        logger.info("%s: target MAE %.5f", label, reports[label].horizon_average())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for label in logs:
            logs[label].to_csv(out / f"loss_{label}.csv")
            reports[label].to_csv(out / f"report_{label}.csv")
        plot_losses(out / "loss_curves.png", logs)
    return AblationResult(logs, reports, models, inits)
