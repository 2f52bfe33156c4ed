"""Multi-graph time-series ingestion, splitting, windowing and normalization."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    CignnWarning,
    ConfigError,
    DataError,
    InputError,
    InsufficientDataError,
    ParseError,
)
from .graphs import AdjacencyMatrix

logger = logging.getLogger(__name__)

Role = Literal["target", "context"]


@dataclass(frozen=True)
class GraphSpec:
    graph_id: str
    role: Role
    node_ids: tuple[str, ...]
    feature_names: tuple[str, ...]
    coordinates: np.ndarray | None = None
    adjacency: AdjacencyMatrix | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def with_adjacency(self, adjacency: AdjacencyMatrix) -> GraphSpec:
        if adjacency.n != self.n_nodes:
            raise InputError(f"graph {self.graph_id}: adjacency has {adjacency.n} nodes, expected {self.n_nodes}")
        return replace(self, adjacency=adjacency)


@dataclass(frozen=True)
class GraphSignal:
    graph_id: str
    values: np.ndarray  # (T, N, P)
    timestamps: np.ndarray  # datetime64[s], length T
    node_ids: tuple[str, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise DataError(f"graph {self.graph_id}: signal must be T x N x P with all sizes >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError(f"graph {self.graph_id}: missing or non-finite values")
        if len(self.timestamps) != v.shape[0]:
            raise AlignmentError(f"graph {self.graph_id}: {len(self.timestamps)} timestamps for {v.shape[0]} rows")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class GraphCollection:
    """M graphs sharing one time axis; exactly one is the forecasting target.

    ``offset`` is the absolute index of the first timestamp within the
    original series, and ``segment`` names the split a slice came from.
    """

    graphs: tuple[GraphSpec, ...]
    signals: tuple[GraphSignal, ...]
    interval_seconds: int
    period_steps: int | None = None
    offset: int = 0
    segment: str | None = None

    def __post_init__(self):
        if not self.graphs:
            raise DataError("collection needs at least one graph")
        if len(self.graphs) != len(self.signals):
            raise DataError("one signal is required per graph")
        targets = [g.graph_id for g in self.graphs if g.role == "target"]
        if len(targets) != 1:
            raise DataError(f"exactly one target graph required, found {targets or 'none'}")
        ids = [g.graph_id for g in self.graphs]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate graph ids: {ids}")
        ref = self.signals[0].timestamps
        for spec, sig in zip(self.graphs, self.signals):
            if sig.graph_id != spec.graph_id:
                raise DataError(f"signal {sig.graph_id} does not match graph {spec.graph_id}")
            if sig.values.shape[1:] != (spec.n_nodes, spec.n_features):
                raise DataError(f"graph {spec.graph_id}: signal shape {sig.values.shape} vs spec nodes/features")
            _check_aligned(self.signals[0].graph_id, ref, sig.graph_id, sig.timestamps)

    @property
    def n_graphs(self) -> int:
        return len(self.graphs)

    @property
    def length(self) -> int:
        return self.signals[0].values.shape[0]

    @property
    def timestamps(self) -> np.ndarray:
        return self.signals[0].timestamps

    @property
    def target_index(self) -> int:
        return next(i for i, g in enumerate(self.graphs) if g.role == "target")

    def values(self, i: int) -> np.ndarray:
        return self.signals[i].values

    def slice(self, start: int, stop: int, segment: str | None = None) -> GraphCollection:
        sigs = tuple(
            replace(s, values=s.values[start:stop], timestamps=s.timestamps[start:stop]) for s in self.signals
        )
        return replace(self, signals=sigs, offset=self.offset + start, segment=segment)

    def with_values(self, values: Sequence[np.ndarray]) -> GraphCollection:
        sigs = tuple(replace(s, values=v) for s, v in zip(self.signals, values))
        return replace(self, signals=sigs)

    def with_graphs(self, graphs: Sequence[GraphSpec]) -> GraphCollection:
        return replace(self, graphs=tuple(graphs))

    def select(self, indices: Sequence[int]) -> GraphCollection:
        """Sub-collection of the given graphs; one of them must be the target."""
        return replace(
            self,
            graphs=tuple(self.graphs[i] for i in indices),
            signals=tuple(self.signals[i] for i in indices),
        )


@dataclass(frozen=True)
class WindowedSample:
    inputs: tuple[np.ndarray, ...]  # per graph (T_w, N, P)
    targets: tuple[np.ndarray, ...]  # per graph (T_h, N, P)
    origin: np.datetime64  # timestamp of the last input step
    origin_index: int  # absolute index of the last input step


def _check_aligned(ref_id: str, ref: np.ndarray, other_id: str, other: np.ndarray) -> None:
    if len(ref) == len(other) and np.array_equal(ref, other):
        return
    n = min(len(ref), len(other))
    diff = np.nonzero(ref[:n] != other[:n])[0]
    if diff.size:
        k = int(diff[0])
        raise AlignmentError(
            f"timestamps of {other_id} diverge from {ref_id} at row {k}: {other[k]} vs {ref[k]}"
        )
    raise AlignmentError(
        f"{other_id} has {len(other)} timestamps but {ref_id} has {len(ref)}; first divergence at row {n}"
    )


def _parse_timestamp(text: str, where: str) -> np.datetime64:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(t)
    except ValueError:
        raise ParseError(f"{where}: invalid ISO-8601 timestamp {text!r}") from None
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def read_series_csv(path: Path) -> tuple[np.ndarray, tuple[str, ...], np.ndarray]:
    """Read one feature file: timestamps, node column names, and a T x N value table."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: expected a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise DataError(f"{path}: need a timestamp column and at least one node column")
    nodes = tuple(header[1:])
    stamps = []
    values = np.empty((len(rows) - 1, len(nodes)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        stamps.append(_parse_timestamp(row[0], f"{path}: row {r}"))
        for c, cell in enumerate(row[1:], start=2):
            try:
                values[r - 2, c - 2] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            if not math.isfinite(values[r - 2, c - 2]):
                raise ParseError(f"{path}: missing or non-finite value at row {r}, column {c}")
    return np.array(stamps, dtype="datetime64[s]"), nodes, values


def _read_coordinates(path: Path, node_ids: tuple[str, ...]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    lookup = {}
    for r, row in enumerate(rows[1:], start=2):
        if len(row) < 3:
            raise ParseError(f"{path}: row {r} needs node-id, x, y")
        try:
            lookup[row[0].strip()] = (float(row[1]), float(row[2]))
        except ValueError:
            raise ParseError(f"{path}: non-numeric coordinate at row {r}") from None
    missing = [n for n in node_ids if n not in lookup]
    if missing:
        raise DataError(f"{path}: no coordinates for nodes {missing}")
    return np.array([lookup[n] for n in node_ids])


def _check_interval(graph_id: str, stamps: np.ndarray, interval: int) -> None:
    if len(stamps) < 2:
        return
    steps = np.diff(stamps).astype("timedelta64[s]").astype(np.int64)
    bad = np.nonzero(steps != interval)[0]
    if bad.size:
        k = int(bad[0])
        raise AlignmentError(
            f"graph {graph_id}: interval between rows {k + 2} and {k + 3} is {steps[k]}s, expected {interval}s"
        )


def load_collection(manifest_path) -> GraphCollection:
    """Load and validate every graph listed in a JSON manifest."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{manifest_path}: invalid JSON ({exc})") from None
    base = manifest_path.parent
    try:
        interval = int(manifest["interval-seconds"])
        entries = manifest["graphs"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{manifest_path}: missing or invalid field {exc}") from None
    if interval <= 0:
        raise ConfigError("interval-seconds must be positive")

    graphs, signals = [], []
    for entry in entries:
        gid = str(entry.get("id", ""))
        role = entry.get("role")
        if not gid or role not in ("target", "context"):
            raise ConfigError(f"{manifest_path}: each graph needs an id and role target|context")
        files = entry.get("files") or []
        if not files:
            raise ConfigError(f"graph {gid}: no files listed")
        stamps = nodes = None
        features, tables = [], []
        for f in files:
            path = base / f["path"]
            if not path.exists():
                raise ConfigError(f"graph {gid}: file not found {path}")
            st, nd, vals = read_series_csv(path)
            if stamps is None:
                stamps, nodes = st, nd
            else:
                _check_aligned(f"{gid}/{features[0]}", stamps, f"{gid}/{f['feature']}", st)
                if nd != nodes:
                    raise DataError(f"graph {gid}: feature {f['feature']} has node columns {nd}, expected {nodes}")
            features.append(str(f["feature"]))
            tables.append(vals)
        _check_interval(gid, stamps, interval)
        coords = None
        if entry.get("coordinates-path"):
            coords = _read_coordinates(base / entry["coordinates-path"], nodes)
        graphs.append(GraphSpec(gid, role, nodes, tuple(features), coords))
        signals.append(GraphSignal(gid, np.stack(tables, axis=-1), stamps, nodes, tuple(features)))

    period = manifest.get("period-steps")
    return GraphCollection(tuple(graphs), tuple(signals), interval, int(period) if period else None)


def write_collection(collection: GraphCollection, directory, manifest_name: str = "manifest.json") -> Path:
    """Write one CSV per graph feature plus coordinates and a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stamps = [str(t) for t in collection.timestamps.astype("datetime64[s]")]
    entries = []
    for spec, sig in zip(collection.graphs, collection.signals):
        files = []
        for p, feat in enumerate(spec.feature_names):
            name = f"{spec.graph_id}_{feat}.csv"
            with open(directory / name, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["timestamp", *spec.node_ids])
                for t, row in zip(stamps, sig.values[:, :, p]):
                    w.writerow([t, *(repr(float(v)) for v in row)])
            files.append({"feature": feat, "path": name})
        entry = {"id": spec.graph_id, "role": spec.role, "files": files}
        if spec.coordinates is not None:
            cname = f"{spec.graph_id}_coordinates.csv"
            with open(directory / cname, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["node-id", "x", "y"])
                for node, (x, y) in zip(spec.node_ids, spec.coordinates):
                    w.writerow([node, repr(float(x)), repr(float(y))])
            entry["coordinates-path"] = cname
        entries.append(entry)
    manifest = {"graphs": entries, "interval-seconds": collection.interval_seconds}
    if collection.period_steps:
        manifest["period-steps"] = collection.period_steps
    path = directory / manifest_name
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class Split:
    train: GraphCollection
    validation: GraphCollection
    test: GraphCollection

    def __iter__(self):
        return iter((self.train, self.validation, self.test))


def split_bounds(length: int, ratios: Sequence[float] = (0.7, 0.1, 0.2)) -> tuple[int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InputError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    # rounding guards against 0.7 + 0.1 landing just below 0.8
    b1 = math.floor(round(ratios[0] * length, 9))
    b2 = math.floor(round((ratios[0] + ratios[1]) * length, 9))
    return b1, b2


def chronological_split(
    collection: GraphCollection,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    window: int = 6,
    horizon: int = 3,
) -> Split:
    """Contiguous train/validation/test segments in time order."""
    b1, b2 = split_bounds(collection.length, ratios)
    parts = [("train", 0, b1), ("validation", b1, b2), ("test", b2, collection.length)]
    need = window + horizon
    short = [f"{name} has {hi - lo}" for name, lo, hi in parts if hi - lo < need]
    if short:
        raise InsufficientDataError(f"segments shorter than window + horizon = {need} steps: {', '.join(short)}")
    return Split(*(collection.slice(lo, hi, segment=name) for name, lo, hi in parts))


def make_windows(segment: GraphCollection, window: int, horizon: int) -> list[WindowedSample]:
    """Stride-1 supervised samples: ``window`` inputs followed by ``horizon`` targets."""
    if window < 1 or horizon < 1:
        raise InputError(f"window and horizon must be >= 1, got {window}, {horizon}")
    count = segment.length - window - horizon + 1
    if count < 1:
        raise InsufficientDataError(
            f"segment of length {segment.length} is shorter than window + horizon = {window + horizon}"
        )
    out = []
    stamps = segment.timestamps
    for s in range(count):
        last = s + window - 1
        out.append(
            WindowedSample(
                inputs=tuple(v[s : s + window] for v in (sig.values for sig in segment.signals)),
                targets=tuple(v[s + window : s + window + horizon] for v in (sig.values for sig in segment.signals)),
                origin=stamps[last],
                origin_index=segment.offset + last,
            )
        )
    return out


def stack_windows(samples: Sequence[WindowedSample]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Batch samples into per-graph ``(B, T_w, N, P)`` inputs and ``(B, T_h, N, P)`` targets."""
    n_graphs = len(samples[0].inputs)
    inputs = [np.stack([s.inputs[g] for s in samples]) for g in range(n_graphs)]
    targets = [np.stack([s.targets[g] for s in samples]) for g in range(n_graphs)]
    return inputs, targets


@dataclass(frozen=True)
class NormStats:
    """Per-node, per-feature z-score statistics taken from a training segment."""

    mean: tuple[np.ndarray, ...]
    std: tuple[np.ndarray, ...]

    @classmethod
    def fit(cls, train: GraphCollection) -> NormStats:
        if train.segment != "train":
            raise InputError(f"normalization statistics must come from the train segment, got {train.segment!r}")
        means, stds = [], []
        for spec, sig in zip(train.graphs, train.signals):
            mu = sig.values.mean(axis=0)
            sd = sig.values.std(axis=0)
            flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
            if np.any(flat):
                nodes = [spec.node_ids[n] for n in np.unique(np.nonzero(flat)[0])]
                warnings.warn(
                    f"graph {spec.graph_id}: constant training values at nodes {nodes}; passed through unscaled",
                    CignnWarning,
                    stacklevel=2,
                )
                mu = np.where(flat, 0.0, mu)
                sd = np.where(flat, 1.0, sd)
            means.append(mu)
            stds.append(sd)
        return cls(tuple(means), tuple(stds))

    def transform(self, values: np.ndarray, graph: int) -> np.ndarray:
        return (values - self.mean[graph]) / self.std[graph]

    def inverse(self, values: np.ndarray, graph: int) -> np.ndarray:
        return values * self.std[graph] + self.mean[graph]

    def to_dict(self) -> dict:
        return {"mean": [m.tolist() for m in self.mean], "std": [s.tolist() for s in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(tuple(np.array(m) for m in d["mean"]), tuple(np.array(s) for s in d["std"]))


def fit_normalizer(train: GraphCollection) -> NormStats:
    return NormStats.fit(train)


def normalize(stats: NormStats, collection: GraphCollection) -> GraphCollection:
    return collection.with_values([stats.transform(s.values, g) for g, s in enumerate(collection.signals)])


def denormalize(stats: NormStats, collection: GraphCollection) -> GraphCollection:
    return collection.with_values([stats.inverse(s.values, g) for g, s in enumerate(collection.signals)])


def _smooth_noise(rng: np.random.Generator, length: int, width: float) -> np.ndarray:
    """Unit-variance white noise convolved with a Gaussian of ``width`` steps."""
    half = int(math.ceil(4 * width))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    e = rng.standard_normal(length + 2 * half)
    x = np.convolve(e, k / np.sqrt((k * k).sum()), mode="valid")
    return x[:length]


def synthesize_coupled(
    seed: int,
    n_graphs: int = 2,
    nodes_per_graph: int | Sequence[int] = 4,
    length: int = 200,
    coupling: float = 0.8,
    *,
    period: int = 24,
    lag: int = 1,
    noise: float = 0.1,
    smoothness: float = 3.0,
    interval_seconds: int = 3600,
    start: str = "2020-01-01T00:00:00",
) -> GraphCollection:
    """Target graph driven by lagged context signals, for desk-scale checks.

    Graph 0 is the target ("demand"); graphs 1..M-1 are contexts.  Each
    context graph follows one shared unit-variance anomaly (white noise
    smoothed over ``smoothness`` steps) plus a small node-specific cycle and
    jitter.  Target node ``n`` at time ``t`` is

        sin(2 pi t / period + phase_n) + noise * spatial_noise_n(t)
            + coupling * w_n * mean_j(mean context_j(t - lag))

    Contexts, target base and target noise are drawn from separate streams,
    so datasets that differ only in ``coupling`` share all context series.
    """
    if not 0.0 <= coupling <= 1.0:
        raise InputError(f"coupling must be in [0, 1], got {coupling}")
    if n_graphs < 1 or length < 2 or lag < 0 or smoothness <= 0:
        raise InputError("need n_graphs >= 1, length >= 2, lag >= 0 and positive smoothness")
    sizes = [nodes_per_graph] * n_graphs if isinstance(nodes_per_graph, int) else list(nodes_per_graph)
    if len(sizes) != n_graphs or min(sizes) < 1:
        raise InputError(f"nodes_per_graph must give {n_graphs} positive sizes")

    ctx_ss, tgt_ss, noise_ss, geo_ss = np.random.SeedSequence(seed).spawn(4)
    ctx_rng = np.random.default_rng(ctx_ss)
    geo_rng = np.random.default_rng(geo_ss)
    full = length + lag
    t = np.arange(full)

    coords = [geo_rng.uniform(0.0, 10.0, size=(n, 2)) for n in sizes]

    contexts = []
    for j in range(1, n_graphs):
        anomaly = _smooth_noise(ctx_rng, full, smoothness)
        phases = ctx_rng.uniform(0, 2 * np.pi, size=sizes[j])
        jitter = np.stack([_smooth_noise(ctx_rng, full, smoothness) for _ in range(sizes[j])], axis=1)
        contexts.append(anomaly[:, None] + 0.3 * np.sin(2 * np.pi * t[:, None] / period + phases) + 0.1 * jitter)

    tgt_rng = np.random.default_rng(tgt_ss)
    n0 = sizes[0]
    phases = tgt_rng.uniform(0, 2 * np.pi, size=n0)
    weights = tgt_rng.uniform(0.5, 1.5, size=n0)
    target = np.sin(2 * np.pi * t[lag:, None] / period + phases)

    noise_rng = np.random.default_rng(noise_ss)
    dist = np.sqrt(((coords[0][:, None] - coords[0][None]) ** 2).sum(-1))
    kernel = np.exp(-(dist**2) / 4.0)
    kernel /= kernel.sum(axis=1, keepdims=True)
    target = target + noise * (noise_rng.standard_normal((length, n0)) @ kernel.T)

    if contexts:
        driver = np.mean([c.mean(axis=1) for c in contexts], axis=0)
        target = target + coupling * weights[None, :] * driver[:length, None]

    t0 = np.datetime64(start, "s")
    stamps = t0 + np.arange(length) * np.timedelta64(interval_seconds, "s")
    graphs, signals = [], []
    all_values = [target] + [c[lag:] for c in contexts]
    for g, (vals, n) in enumerate(zip(all_values, sizes)):
        gid = "demand" if g == 0 else f"context{g}"
        nodes = tuple(f"{gid}_{k}" for k in range(n))
        graphs.append(GraphSpec(gid, "target" if g == 0 else "context", nodes, ("value",), coords[g]))
        signals.append(GraphSignal(gid, vals[:, :, None], stamps, nodes, ("value",)))
    return GraphCollection(tuple(graphs), tuple(signals), interval_seconds, period)
