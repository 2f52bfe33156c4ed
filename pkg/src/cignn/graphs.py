"""Adjacency construction, normalized Laplacians and Chebyshev bases."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CignnWarning, DataError, DegenerateVarianceError, InputError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_DCCA_WINDOW = 4


@dataclass(frozen=True)
class AdjacencyMatrix:
    values: np.ndarray
    kind: Literal["spatial", "relational", "given"] = "given"

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InputError(f"adjacency must be square, got shape {a.shape}")
        if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
            raise InputError("adjacency matrix is not symmetric")
        if np.any(a < 0) or np.any(a > 1):
            raise InputError("adjacency entries must lie in [0, 1]")
        if self.kind == "spatial" and np.any(np.diag(a) != 0):
            raise InputError("spatial adjacency must have a zero diagonal")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "values", a)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LaplacianBundle:
    laplacian: np.ndarray
    scaled: np.ndarray
    cheb_basis: tuple[np.ndarray, ...]

    @property
    def stacked(self) -> np.ndarray:
        return np.stack(self.cheb_basis)


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def default_bandwidth(distances: np.ndarray) -> float:
    """Standard deviation of the off-diagonal distances, the usual kernel width.

    Falls back to the mean distance (then 1.0) when the spread is zero, which
    happens for two-node graphs.
    """
    d = np.asarray(distances, dtype=np.float64)
    iu = np.triu_indices(d.shape[0], k=1)
    vals = d[iu]
    if vals.size == 0:
        return 1.0
    std = float(vals.std())
    if std > 0:
        return std
    m = float(vals.mean())
    return m if m > 0 else 1.0


def gaussian_kernel_adjacency(
    distances: np.ndarray, sigma: float | None = None, kappa: float | None = None
) -> AdjacencyMatrix:
    """Truncated Gaussian kernel ``exp(-d^2 / sigma^2)`` for ``d <= kappa``."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InputError(f"distance matrix must be square, got {d.shape}")
    if np.any(d < 0):
        raise InputError("distances must be nonnegative")
    if not np.allclose(d, d.T, rtol=0.0, atol=1e-12):
        raise InputError("distance matrix is not symmetric")
    if sigma is None:
        sigma = default_bandwidth(d)
    if kappa is None:
        kappa = default_bandwidth(d)
    if sigma <= 0 or kappa <= 0:
        raise InputError(f"sigma and kappa must be positive (sigma={sigma}, kappa={kappa})")
    a = np.where(d <= kappa, np.exp(-(d**2) / sigma**2), 0.0)
    np.fill_diagonal(a, 0.0)
    if d.shape[0] > 1 and not np.any(a > 0):
        warnings.warn(f"all distances exceed kappa={kappa:g}; adjacency is empty", CignnWarning, stacklevel=2)
    return AdjacencyMatrix(a, kind="spatial")


def _check_window(length: int, window: int) -> None:
    if not 2 <= window <= length:
        raise InputError(f"DCCA window must satisfy 2 <= l <= T (l={window}, T={length})")


def _window_deviations(x: np.ndarray, window: int) -> np.ndarray:
    w = sliding_window_view(x, window, axis=-1)
    return w - w.mean(axis=-1, keepdims=True)


def _is_degenerate(sq_sum: float, x: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(x))) ** 2)
    return sq_sum <= 1e-24 * scale * x.shape[-1]


def dcca_coefficient(x, y, window: int = DEFAULT_DCCA_WINDOW) -> float:
    """Detrended cross-correlation coefficient over all sliding windows.

    Each of the ``T - l + 1`` windows is demeaned with its own average.  The
    per-window ``1/(l-1)`` and the ``1/(T-l)`` averaging factors are common to
    numerator and denominator, so the coefficient is the ratio of the summed
    cross products to the geometric mean of the summed squares.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise InputError(f"series must be 1-D and equally long, got {x.shape} and {y.shape}")
    _check_window(x.size, window)
    dx = _window_deviations(x, window)
    dy = _window_deviations(y, window)
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    if _is_degenerate(sxx, x) or _is_degenerate(syy, y):
        raise DegenerateVarianceError("series has zero variance in every window")
    rho = float((dx * dy).sum()) / np.sqrt(sxx * syy)
    return float(np.clip(rho, -1.0, 1.0))


def relational_matrix(
    signals,
    window: int = DEFAULT_DCCA_WINDOW,
    threshold: float = 0.0,
    on_degenerate: Literal["warn", "raise"] = "warn",
) -> AdjacencyMatrix:
    """Pairwise DCCA coefficients clipped below ``threshold`` to zero.

    ``signals`` holds one series per row, shape ``(n, T)``.
    """
    s = np.asarray(signals, dtype=np.float64)
    if s.ndim != 2:
        raise InputError(f"signals must have shape (n, T), got {s.shape}")
    n, length = s.shape
    _check_window(length, window)
    dev = _window_deviations(s, window).reshape(n, -1)
    cross = dev @ dev.T
    sq = np.diag(cross).copy()
    bad = [i for i in range(n) if _is_degenerate(sq[i], s[i])]
    if bad:
        if on_degenerate == "raise":
            other = next((j for j in range(n) if j != bad[0]), bad[0])
            pair = (min(bad[0], other), max(bad[0], other))
            raise DegenerateVarianceError(f"degenerate variance for pair {pair}: node {bad[0]} is constant")
        warnings.warn(f"constant series at nodes {bad}; their correlations are set to 0", CignnWarning, stacklevel=2)
        logger.warning("constant series at nodes %s; correlations set to 0", bad)
    good = np.ones(n, dtype=bool)
    good[bad] = False
    denom = np.sqrt(np.outer(np.where(good, sq, 1.0), np.where(good, sq, 1.0)))
    rho = np.clip(cross / denom, -1.0, 1.0)
    rho[~good, :] = 0.0
    rho[:, ~good] = 0.0
    a = np.where(rho >= threshold, np.maximum(rho, 0.0), 0.0)
    a = (a + a.T) / 2.0
    np.fill_diagonal(a, 0.0)
    return AdjacencyMatrix(a, kind="relational")


def normalized_laplacian(adjacency) -> np.ndarray:
    """``D^-1/2 (D - A) D^-1/2`` with zero rows for isolated nodes."""
    a = adjacency.values if isinstance(adjacency, AdjacencyMatrix) else np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0) or not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise InputError("adjacency must be symmetric and nonnegative")
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = inv_sqrt[:, None] * (np.diag(deg) - a) * inv_sqrt[None, :]
    return (lap + lap.T) / 2.0


def chebyshev_basis(laplacian: np.ndarray, order: int, lambda_max: float = 2.0) -> list[np.ndarray]:
    """First ``order`` Chebyshev polynomials of the rescaled Laplacian.

    The rescaling is ``2 L / lambda_max - I``; with the default ``lambda_max``
    of 2 it reduces to ``L - I``.
    """
    if order < 1:
        raise InputError(f"Chebyshev order must be >= 1, got {order}")
    lap = np.asarray(laplacian, dtype=np.float64)
    n = lap.shape[0]
    eye = np.eye(n)
    scaled = 2.0 * lap / lambda_max - eye
    basis = [eye]
    if order > 1:
        basis.append(scaled)
    for _ in range(2, order):
        basis.append(2.0 * scaled @ basis[-1] - basis[-2])
    return basis


def laplacian_bundle(adjacency, order: int) -> LaplacianBundle:
    lap = normalized_laplacian(adjacency)
    basis = chebyshev_basis(lap, order)
    return LaplacianBundle(lap, lap - np.eye(lap.shape[0]), tuple(basis))


def save_adjacency_csv(path, adjacency) -> None:
    a = adjacency.values if isinstance(adjacency, AdjacencyMatrix) else np.asarray(adjacency)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in a:
            writer.writerow([repr(float(v)) for v in row])


def load_adjacency_csv(path, kind: str = "given") -> AdjacencyMatrix:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(f"{path}: non-numeric adjacency entry in row {r}") from None
    if not rows or any(len(r) != len(rows) for r in rows):
        raise DataError(f"{path}: adjacency CSV must be a non-empty square table")
    return AdjacencyMatrix(np.array(rows), kind=kind)


def adjacency_summary(adjacency: AdjacencyMatrix) -> dict:
    a = adjacency.values
    deg = a.sum(axis=1)
    eig = np.linalg.eigvalsh(normalized_laplacian(a))
    return {
        "n": adjacency.n,
        "kind": adjacency.kind,
        "edges": int(np.count_nonzero(np.triu(a, k=1))),
        "degree_min": float(deg.min()),
        "degree_mean": float(deg.mean()),
        "degree_max": float(deg.max()),
        "laplacian_eig_min": float(eig.min()),
        "laplacian_eig_max": float(eig.max()),
    }


def write_summary(path: Path, summaries: dict) -> None:
    Path(path).write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n", encoding="utf-8")
