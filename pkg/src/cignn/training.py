"""Adam training with step-decayed learning rate and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    GraphCollection,
    GraphSpec,
    NormStats,
    Split,
    WindowedSample,
    chronological_split,
    make_windows,
    normalize,
    stack_windows,
)
from .errors import ConfigError, DimensionError, InputError, NumericError
from .graphs import (
    DEFAULT_DCCA_WINDOW,
    AdjacencyMatrix,
    gaussian_kernel_adjacency,
    pairwise_distances,
    relational_matrix,
)
from .model import CIGNN, ModelConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    decay: float = 0.1
    decay_every: int = 10
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    seed: int = 0
    window: int = 6
    horizon: int = 3
    cheb_order: int = 1
    hidden: int = 32
    fusion: bool = True
    mode: Literal["standard", "robust"] = "standard"
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        positive = ("lr", "decay", "decay_every", "max_epochs", "patience", "batch_size",
                    "window", "horizon", "cheb_order", "hidden", "clip_norm")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) cannot exceed max_epochs ({self.max_epochs})")
        if self.mode not in ("standard", "robust"):
            raise ConfigError(f"mode must be 'standard' or 'robust', got {self.mode!r}")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.hidden, self.cheb_order, self.window, self.horizon, self.fusion)

    @property
    def clipping(self) -> float | None:
        return self.clip_norm if self.mode == "robust" else None


@dataclass(frozen=True)
class GraphConfig:
    """How adjacency matrices are built when none are supplied."""

    mode: Literal["spatial", "relational"] = "relational"
    sigma: float | None = None
    kappa: float | None = None
    dcca_window: int = DEFAULT_DCCA_WINDOW
    threshold: float = 0.0


def learning_rate(epoch: int, config: TrainConfig) -> float:
    return config.lr * config.decay ** (epoch // config.decay_every)


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    lr: float
    seconds: float
    clipped: int = 0


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def to_csv(self, path, include_time: bool = False) -> None:
        """Loss curve CSV; wall time is left out unless asked for, so reruns compare byte-equal."""
        cols = ["epoch", "train_mae", "val_mae", "lr", "clipped"] + (["seconds"] if include_time else [])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for e in self.epochs:
                row = [e.epoch, repr(e.train_mae), repr(e.val_mae), repr(e.lr), e.clipped]
                if include_time:
                    row.append(f"{e.seconds:.6f}")
                w.writerow(row)

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "epochs_run": len(self.epochs),
            "best_val_mae": self.epochs[self.best_epoch].val_mae if self.epochs else None,
        }


class EarlyStopping:
    """Tracks the best validation loss; a new best must be strictly lower."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.stale = loss, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> AdamState:
        return cls(0, {k: np.zeros(p.shape) for k, p in params.items()}, {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}; training aborted")
    t = state.step + 1
    m, v, out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**t)
        v_hat = v[name] / (1.0 - beta2**t)
        out[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=True, name=name)
    return out, AdamState(t, m, v)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], bool]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads, False
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, True


def mae_loss(predictions: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Mean absolute error pooled over every graph, sample, horizon, node and feature."""
    if len(predictions) != len(targets):
        raise DimensionError(f"{len(predictions)} prediction tensors for {len(targets)} targets")
    count = 0
    parts = []
    for p, y in zip(predictions, targets):
        if p.shape != np.shape(y):
            raise DimensionError(f"prediction shape {p.shape} does not match target {np.shape(y)}")
        parts.append(ad.total(ad.absolute(p - Tensor(y))))
        count += p.size
    loss = parts[0]
    for part in parts[1:]:
        loss = loss + part
    return ad.scale(loss, 1.0 / count)


def loss_and_grads(model: CIGNN, params: dict[str, Tensor], inputs, targets) -> tuple[float, dict[str, np.ndarray]]:
    loss = mae_loss(model.forward(inputs, params), targets)
    by_tensor = ad.backward(loss)
    grads = {name: by_tensor.get(p, np.zeros(p.shape)) for name, p in params.items()}
    return float(loss.data), grads


def dataset_mae(model: CIGNN, samples: Sequence[WindowedSample], params=None, batch_size: int = 256) -> float:
    """Pooled MAE of the model over samples, on whatever scale the samples use."""
    p = model.params if params is None else params
    frozen = {k: v.detach() for k, v in p.items()}
    total, count = 0.0, 0
    for lo in range(0, len(samples), batch_size):
        x, y = stack_windows(samples[lo : lo + batch_size])
        for pred, tgt in zip(model.forward(x, frozen), y):
            total += float(np.abs(pred.data - tgt).sum())
            count += tgt.size
    return total / count


def build_adjacencies(train: GraphCollection, graph_config: GraphConfig) -> list[AdjacencyMatrix]:
    """One adjacency per graph, from coordinates (spatial) or training-segment correlations (relational)."""
    out = []
    for g, spec in enumerate(train.graphs):
        if spec.n_nodes == 1:
            out.append(AdjacencyMatrix(np.zeros((1, 1)), kind=graph_config.mode))
        elif graph_config.mode == "spatial":
            if spec.coordinates is None:
                raise ConfigError(f"graph {spec.graph_id}: spatial mode needs a coordinates file")
            out.append(gaussian_kernel_adjacency(pairwise_distances(spec.coordinates), graph_config.sigma, graph_config.kappa))
        elif graph_config.mode == "relational":
            series = train.values(g)[:, :, 0].T
            out.append(relational_matrix(series, graph_config.dcca_window, graph_config.threshold))
        else:
            raise ConfigError(f"unknown graph mode {graph_config.mode!r}")
    return out


@dataclass
class PreparedData:
    split: Split
    stats: NormStats
    graphs: tuple[GraphSpec, ...]
    train: list[WindowedSample]
    validation: list[WindowedSample]
    test: list[WindowedSample]


def prepare(
    collection: GraphCollection,
    config: TrainConfig,
    graph_config: GraphConfig = GraphConfig(),
    adjacencies: Sequence[AdjacencyMatrix] | None = None,
) -> PreparedData:
    """Split, normalize with training statistics, attach adjacencies and window every segment."""
    split = chronological_split(collection, window=config.window, horizon=config.horizon)
    stats = NormStats.fit(split.train)
    norm = [normalize(stats, seg) for seg in split]
    if adjacencies is None:
        adjacencies = build_adjacencies(split.train, graph_config)
    graphs = tuple(g.with_adjacency(a) for g, a in zip(collection.graphs, adjacencies))
    windows = [make_windows(seg, config.window, config.horizon) for seg in norm]
    return PreparedData(split, stats, graphs, *windows)


@dataclass
class TrainResult:
    model: CIGNN
    log: TrainLog
    stats: NormStats
    data: PreparedData
    initial_params: dict[str, Tensor]


def fit(
    model: CIGNN,
    train_samples: Sequence[WindowedSample],
    val_samples: Sequence[WindowedSample],
    config: TrainConfig,
) -> tuple[CIGNN, TrainLog]:
    """Optimize ``model`` and return a copy holding the best-validation parameters."""
    if not train_samples or not val_samples:
        raise InputError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = model.params
    state = AdamState.zeros(params)
    best_params = params
    stopper = EarlyStopping(config.patience)
    log = TrainLog()
    n = len(train_samples)
    batch = min(config.batch_size, n)
    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        lr = learning_rate(epoch, config)
        order = rng.permutation(n)
        loss_sum, clipped = 0.0, 0
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            x, y = stack_windows([train_samples[i] for i in idx])
            try:
                loss, grads = loss_and_grads(model, params, x, y)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: loss diverged ({exc})") from None
            if config.clipping is not None:
                grads, was_clipped = clip_by_global_norm(grads, config.clipping)
                clipped += was_clipped
            params, state = adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
            loss_sum += loss * len(idx)
        train_mae = loss_sum / n
        val_mae = dataset_mae(model, val_samples, params)
        if stopper.update(epoch, val_mae):
            best_params = params
        log.epochs.append(EpochRecord(epoch, train_mae, val_mae, lr, time.perf_counter() - started, clipped))
        logger.info("epoch %d lr %.2e train %.5f val %.5f", epoch, lr, train_mae, val_mae)
        if stopper.should_stop:
            log.stop_reason = f"validation MAE did not decrease for {config.patience} epochs"
            break
    else:
        log.stop_reason = "max_epochs"
    log.best_epoch = stopper.best_epoch
    return model.with_params(best_params), log


def train(
    collection: GraphCollection,
    config: TrainConfig = TrainConfig(),
    graph_config: GraphConfig = GraphConfig(),
    adjacencies: Sequence[AdjacencyMatrix] | None = None,
) -> TrainResult:
    """Build graphs, initialize a CIGNN from ``config.seed`` and train it."""
    data = prepare(collection, config, graph_config, adjacencies)
    model = CIGNN(data.graphs, config.model_config, seed=config.seed)
    trained, log = fit(model, data.train, data.validation, config)
    return TrainResult(trained, log, data.stats, data, model.params)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
