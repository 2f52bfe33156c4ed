"""CIGNN recurrent unit: graph-convolutional gates, cross-graph fusion, readout.

All internal tensors carry a leading batch axis: hidden states are
``(B, r, N, P)`` and inputs ``(B, N, P)``.  The public helpers
:func:`graph_conv` and :func:`fusion` also accept unbatched operands.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GraphSpec, NormStats
from .errors import ConfigError, DataError, DimensionError
from .graphs import AdjacencyMatrix, laplacian_bundle

CHECKPOINT_FORMAT = "cignn-checkpoint/1"
GATES = ("r", "u", "c")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    cheb_order: int = 1
    window: int = 6
    horizon: int = 3
    fusion: bool = True

    def __post_init__(self):
        for name in ("hidden", "cheb_order", "window", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


def _batch_letters(ndim_core: int, ndim: int, what: str) -> str:
    if ndim == ndim_core:
        return ""
    if ndim == ndim_core + 1:
        return "b"
    raise DimensionError(f"{what}: expected {ndim_core} or {ndim_core + 1} dims, got {ndim}")


def graph_conv(theta: Tensor, basis, x: Tensor) -> Tensor:
    """Chebyshev filter ``sum_k theta_k T_k`` applied along the node axis of ``x``.

    ``basis`` is a ``(K, N, N)`` stack (or sequence) of Chebyshev matrices and
    ``x`` is ``(c, N, P)`` or ``(B, c, N, P)``.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim != 3 or theta.shape != (basis.shape[0],):
        raise DimensionError(f"graph_conv: theta {theta.shape} does not match basis {basis.shape}")
    if x.shape[-2] != basis.shape[1]:
        raise DimensionError(f"graph_conv: input has {x.shape[-2]} nodes, basis has {basis.shape[1]}")
    b = _batch_letters(3, x.ndim, "graph_conv")
    filt = ad.einsum("k,knm->nm", theta, Tensor(basis))
    return ad.einsum(f"nm,{b}cmp->{b}cnp", filt, x)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Channel-axis dense layer: ``(B, c_in, N, P) -> (B, c_out, N, P)``."""
    if weight.shape[0] != x.shape[1] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    y = ad.einsum("bcnp,cd->bdnp", x, weight)
    b = ad.broadcast_to(ad.reshape(bias, (1, bias.shape[0], 1, 1)), y.shape)
    return y + b


def fusion(weight: Tensor, bias: Tensor, z: Tensor, state: Tensor) -> Tensor:
    """Impact of source state ``S_j`` on target graph ``i``.

    Contracts ``z`` against the channel axis of ``S_j``, then ``W_ij`` over
    the source (node, feature) axes, adds the bias, applies a sigmoid and
    restores the channel axis as an outer product with ``z``.

    Shapes: ``weight (N_j, P_j, P_i, N_i)``, ``bias (N_i, P_i)``,
    ``z (r,)``, ``state (r, N_j, P_j)`` or batched ``(B, r, N_j, P_j)``.
    """
    b = _batch_letters(3, state.ndim, "fusion")
    nj, pj, pi, ni = weight.shape
    if state.shape[-3:] != (z.shape[0], nj, pj) or bias.shape != (ni, pi):
        raise DimensionError(
            f"fusion: state {state.shape}, weight {weight.shape}, bias {bias.shape}, z {z.shape} are inconsistent"
        )
    u = ad.einsum(f"{b}cnp,c->{b}np", state, z)
    v = ad.einsum(f"{b}np,npqm->{b}mq", u, weight)
    if b:
        v = v + ad.broadcast_to(ad.reshape(bias, (1, ni, pi)), v.shape)
    else:
        v = v + bias
    return ad.einsum(f"{b}mq,c->{b}cmq", ad.sigmoid(v), z)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def _graph_rng(seed: int, tag: str) -> np.random.Generator:
    # keyed by name so a graph's initial weights do not depend on which other graphs exist
    return np.random.default_rng([seed, zlib.crc32(tag.encode("utf-8"))])


class CIGNN:
    """Multi-graph recurrent forecaster.

    ``graphs`` must carry adjacency matrices.  Parameters are stored in
    ``self.params`` as leaf tensors keyed by name, e.g. ``demand/fc_r/weight``
    or ``fusion/demand<-temp/weight``.
    """

    def __init__(self, graphs: Sequence[GraphSpec], config: ModelConfig = ModelConfig(), seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.graphs = tuple(graphs)
        self.config = config
        for g in self.graphs:
            if g.adjacency is None:
                raise ConfigError(f"graph {g.graph_id} has no adjacency matrix")
        self.bases = [laplacian_bundle(g.adjacency, config.cheb_order).stacked for g in self.graphs]
        self.params = params if params is not None else self.init_params(seed)
        self._check_params(self.params)

    @property
    def n_graphs(self) -> int:
        return len(self.graphs)

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n_graphs) for j in range(self.n_graphs) if i != j]

    @staticmethod
    def pair_key(target: str, source: str) -> str:
        return f"fusion/{target}<-{source}"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        r, k, h = self.config.hidden, self.config.cheb_order, self.config.horizon
        shapes: dict[str, tuple[int, ...]] = {}
        for g in self.graphs:
            for gate in GATES:
                shapes[f"{g.graph_id}/theta_{gate}"] = (k,)
                shapes[f"{g.graph_id}/fc_{gate}/weight"] = (r + 1, r)
                shapes[f"{g.graph_id}/fc_{gate}/bias"] = (r,)
            shapes[f"{g.graph_id}/readout"] = (h, r)
        for i, j in self.pairs():
            gi, gj = self.graphs[i], self.graphs[j]
            key = self.pair_key(gi.graph_id, gj.graph_id)
            shapes[f"{key}/weight"] = (gj.n_nodes, gj.n_features, gi.n_features, gi.n_nodes)
            shapes[f"{key}/bias"] = (gi.n_nodes, gi.n_features)
        shapes["fusion/z"] = (r,)
        return shapes

    def init_params(self, seed: int) -> dict[str, Tensor]:
        r, k = self.config.hidden, self.config.cheb_order
        params: dict[str, np.ndarray] = {}
        small = 0.01
        for g in self.graphs:
            rng = _graph_rng(seed, g.graph_id)
            for gate in GATES:
                params[f"{g.graph_id}/theta_{gate}"] = _uniform(rng, math.sqrt(6.0 / (k + 1)), (k,))
                params[f"{g.graph_id}/fc_{gate}/weight"] = _uniform(rng, math.sqrt(6.0 / (2 * r + 1)), (r + 1, r))
                params[f"{g.graph_id}/fc_{gate}/bias"] = _uniform(rng, small, (r,))
            params[f"{g.graph_id}/readout"] = _uniform(rng, small, (self.config.horizon, r))
        shapes = self.param_shapes()
        for i, j in self.pairs():
            key = self.pair_key(self.graphs[i].graph_id, self.graphs[j].graph_id)
            rng = _graph_rng(seed, key)
            params[f"{key}/weight"] = _uniform(rng, small, shapes[f"{key}/weight"])
            params[f"{key}/bias"] = _uniform(rng, small, shapes[f"{key}/bias"])
        params["fusion/z"] = _uniform(_graph_rng(seed, "fusion/z"), small, (r,))
        return {name: Tensor(v, requires_grad=True, name=name) for name, v in params.items()}

    def _check_params(self, params: dict[str, Tensor]) -> None:
        expected = self.param_shapes()
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    def uses_fusion(self) -> bool:
        return self.config.fusion and self.n_graphs > 1

    def zero_state(self, batch: int) -> list[Tensor]:
        r = self.config.hidden
        return [Tensor(np.zeros((batch, r, g.n_nodes, g.n_features))) for g in self.graphs]

    def _gate(self, p, gid: str, gate: str, basis, stacked: Tensor, activation) -> Tensor:
        conv = graph_conv(p[f"{gid}/theta_{gate}"], basis, stacked)
        return activation(dense(conv, p[f"{gid}/fc_{gate}/weight"], p[f"{gid}/fc_{gate}/bias"]))

    def cell_states(self, xs: Sequence[np.ndarray], hs: Sequence[Tensor], params=None) -> list[Tensor]:
        """Gated per-graph states before fusion, one ``(B, r, N, P)`` per graph."""
        p = self.params if params is None else params
        states = []
        for g, spec in enumerate(self.graphs):
            x, h = xs[g], hs[g]
            if x.ndim != 3 or x.shape[1:] != (spec.n_nodes, spec.n_features) or x.shape[0] != h.shape[0]:
                raise DimensionError(
                    f"graph {spec.graph_id}: input {x.shape} does not match state {h.shape}"
                )
            gid, basis = spec.graph_id, self.bases[g]
            x_lift = Tensor(x[:, None, :, :])
            xh = ad.concat(1, [x_lift, h])
            reset = self._gate(p, gid, "r", basis, xh, ad.sigmoid)
            update = self._gate(p, gid, "u", basis, xh, ad.sigmoid)
            xrh = ad.concat(1, [x_lift, reset * h])
            cand = self._gate(p, gid, "c", basis, xrh, ad.tanh)
            states.append(update * h + (1.0 - update) * cand)
        return states

    def cell_step(self, xs: Sequence[np.ndarray], hs: Sequence[Tensor], params=None) -> list[Tensor]:
        """One recurrent step for every graph, including cross-graph impacts."""
        p = self.params if params is None else params
        states = self.cell_states(xs, hs, p)
        if not self.uses_fusion():
            return states
        out = []
        for i, gi in enumerate(self.graphs):
            h = states[i]
            for j, gj in enumerate(self.graphs):
                if j == i:
                    continue
                key = self.pair_key(gi.graph_id, gj.graph_id)
                h = h + fusion(p[f"{key}/weight"], p[f"{key}/bias"], p["fusion/z"], states[j])
            out.append(h)
        return out

    def forward(self, inputs: Sequence[np.ndarray], params=None) -> list[Tensor]:
        """Predict ``(B, T_h, N, P)`` per graph from ``(B, T_w, N, P)`` windows."""
        p = self.params if params is None else params
        if len(inputs) != self.n_graphs:
            raise DimensionError(f"expected inputs for {self.n_graphs} graphs, got {len(inputs)}")
        batch, steps = inputs[0].shape[:2]
        if steps < 1:
            raise DimensionError("input window must have at least one step")
        for g, x in enumerate(inputs):
            if x.ndim != 4 or x.shape[:2] != (batch, steps):
                raise DimensionError(f"graph {self.graphs[g].graph_id}: input shape {x.shape} vs ({batch}, {steps}, N, P)")
        hs = self.zero_state(batch)
        for t in range(steps):
            hs = self.cell_step([x[:, t] for x in inputs], hs, p)
        return [ad.einsum("bcnp,hc->bhnp", h, p[f"{g.graph_id}/readout"]) for g, h in zip(self.graphs, hs)]

    def predict(self, inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
        frozen = {k: v.detach() for k, v in self.params.items()}
        return [t.data.copy() for t in self.forward(inputs, frozen)]

    def with_params(self, params: dict[str, Tensor]) -> CIGNN:
        clone = object.__new__(CIGNN)
        clone.graphs, clone.config, clone.bases = self.graphs, self.config, self.bases
        clone.params = params
        self._check_params(params)
        return clone


def architecture(model: CIGNN) -> dict:
    return {
        "config": asdict(model.config),
        "graphs": [
            {"id": g.graph_id, "role": g.role, "nodes": g.n_nodes, "features": g.n_features} for g in model.graphs
        ],
    }


def save_checkpoint(path, model: CIGNN, stats: NormStats | None = None, metadata: dict | None = None) -> None:
    """Write a self-describing JSON checkpoint.

    Floats are written with ``repr`` so values survive a round trip exactly
    and identical models serialize to identical bytes.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": architecture(model),
        "graphs": [
            {
                "id": g.graph_id,
                "role": g.role,
                "node_ids": list(g.node_ids),
                "feature_names": list(g.feature_names),
                "adjacency": g.adjacency.values.tolist(),
                "adjacency_kind": g.adjacency.kind,
            }
            for g in model.graphs
        ],
        "normalization": stats.to_dict() if stats is not None else None,
        "params": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()} for name, t in sorted(model.params.items())
        },
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[CIGNN, NormStats | None, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    config = ModelConfig(**doc["architecture"]["config"])
    graphs = [
        GraphSpec(
            g["id"],
            g["role"],
            tuple(g["node_ids"]),
            tuple(g["feature_names"]),
            adjacency=AdjacencyMatrix(np.array(g["adjacency"]), kind=g["adjacency_kind"]),
        )
        for g in doc["graphs"]
    ]
    params = {
        name: Tensor(np.array(v["data"], dtype=np.float64).reshape(v["shape"]), requires_grad=True, name=name)
        for name, v in doc["params"].items()
    }
    stats = NormStats.from_dict(doc["normalization"]) if doc.get("normalization") else None
    return CIGNN(graphs, config, params=params), stats, doc.get("metadata", {})


def check_compatible(model: CIGNN, graphs: Sequence[GraphSpec]) -> None:
    """Raise ConfigError listing every dimension where a dataset differs from a model."""
    problems = []
    if len(graphs) != model.n_graphs:
        problems.append(f"graph count: checkpoint {model.n_graphs}, data {len(graphs)}")
    for mg, dg in zip(model.graphs, graphs):
        if mg.graph_id != dg.graph_id:
            problems.append(f"graph id: checkpoint {mg.graph_id}, data {dg.graph_id}")
        if mg.role != dg.role:
            problems.append(f"{mg.graph_id} role: checkpoint {mg.role}, data {dg.role}")
        if mg.n_nodes != dg.n_nodes:
            problems.append(f"{mg.graph_id} nodes: checkpoint {mg.n_nodes}, data {dg.n_nodes}")
        if mg.n_features != dg.n_features:
            problems.append(f"{mg.graph_id} features: checkpoint {mg.n_features}, data {dg.n_features}")
    if problems:
        raise ConfigError("architecture mismatch: " + "; ".join(problems))
