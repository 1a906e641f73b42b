"""Weighted augmented maximum-likelihood estimation of the velocity field.

    theta_hat(x) = -I^{-1} sum_k w_k(x) ( int G_k dX_k - a int L_k G_k dt ),
    I            =          sum_k w_k(x) int G_k G_k^T dt,

where ``X_k, G_k, L_k`` are the value, gradient and Laplacian measurements at
location ``k``.  All functions accept either a :class:`LocalMeasurementSet`
or precomputed :class:`LocalStatistics`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measurements import LocalMeasurementSet, LocalStatistics
from .weights import WeightSet

COND_LIMIT = 1e12


class EstimationError(RuntimeError):
    pass


class SingularFisherError(EstimationError):
    def __init__(self, message, fisher=None, cond=None):
        super().__init__(message)
        self.fisher, self.cond = fisher, cond


def _stats(meas) -> LocalStatistics:
    if isinstance(meas, LocalStatistics):
        return meas
    if isinstance(meas, LocalMeasurementSet):
        return meas.statistics()
    raise TypeError(f"expected measurements or statistics, got {type(meas).__name__}")


def _w(ws) -> np.ndarray:
    return np.asarray(ws.w if isinstance(ws, WeightSet) else ws, dtype=float)


@dataclass
class VelocityEstimate:
    x: np.ndarray
    theta_hat: np.ndarray
    fisher: np.ndarray
    a_used: float
    a_source: str
    cond: float
    n_active: int
    quadratic_variation: np.ndarray | None = None
    h: float = float("nan")


def observed_fisher(meas, ws) -> np.ndarray:
    """``sum_k w_k int G_k G_k^T dt``."""
    s, w = _stats(meas), _w(ws)
    return np.einsum("k,kij->ij", w, s.fisher)


def quadratic_variation(meas, ws) -> np.ndarray:
    """Martingale diagnostic ``sum_k w_k^2 int G_k G_k^T dt``."""
    s, w = _stats(meas), _w(ws)
    return np.einsum("k,kij->ij", w**2, s.fisher)


def drift_cross(meas, ws) -> np.ndarray:
    """``U = sum_k w_k int G_k L_k dt``, the sensitivity of the score to ``a``."""
    s, w = _stats(meas), _w(ws)
    return w @ s.lap_grad


def _solve(fisher: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    cond = float(np.linalg.cond(fisher)) if np.all(np.isfinite(fisher)) else np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT or not np.any(fisher):
        raise SingularFisherError(f"observed Fisher information is singular (condition {cond:.3g})",
                                  fisher, cond)
    return np.linalg.solve(fisher, rhs), cond


def weighted_augmented_mle(meas, ws, a: float, *, a_source: str = "known") -> VelocityEstimate:
    s, w = _stats(meas), _w(ws)
    fisher = np.einsum("k,kij->ij", w, s.fisher)
    score = w @ (s.ito_grad - a * s.lap_grad)
    sol, cond = _solve(fisher, score)
    x, h = (ws.x, ws.h) if isinstance(ws, WeightSet) else (np.array([np.nan]), float("nan"))
    return VelocityEstimate(np.asarray(x), -sol, fisher, float(a), a_source, cond,
                            int(np.count_nonzero(w)), np.einsum("k,kij->ij", w**2, s.fisher), h)


def estimate_a(meas, ws=None) -> float:
    """``sum w_k int L_k dX_k / sum w_k int L_k^2 dt``; all locations with unit
    weight when ``ws`` is None."""
    s = _stats(meas)
    w = np.ones(s.n_locations) if ws is None else _w(ws)
    den = float(w @ s.lap_sq)
    if not den > 0:
        raise EstimationError(f"diffusivity estimate undefined: denominator {den:.3g}")
    return float(w @ s.ito_lap) / den


def mle_unknown_a(meas, ws, *, a_weights=None, a_override: float | None = None) -> VelocityEstimate:
    """Plug-in estimate with ``a`` replaced by :func:`estimate_a` (unweighted
    unless ``a_weights`` is given).  ``a_override`` fixes the plugged value."""
    s = _stats(meas)
    if a_override is not None:
        return weighted_augmented_mle(s, ws, a_override, a_source="override")
    a_hat = estimate_a(s, a_weights)
    return weighted_augmented_mle(s, ws, a_hat, a_source="estimated")


# -- many evaluation points at once -------------------------------------------------


def estimate_many(stats: LocalStatistics, W: np.ndarray, a: float) -> tuple[np.ndarray, np.ndarray]:
    """Estimates for the weight rows ``W`` (shape ``(n_x, N)``).

    Returns ``theta_hat`` of shape ``(n_x, d)`` (NaN where the Fisher matrix is
    singular) and the condition numbers.
    """
    fisher = np.einsum("xk,kij->xij", W, stats.fisher)
    score = W @ (stats.ito_grad - a * stats.lap_grad)
    cond = np.full(len(W), np.inf)
    ok = np.all(np.isfinite(fisher), axis=(1, 2)) & np.any(fisher != 0, axis=(1, 2))
    cond[ok] = np.linalg.cond(fisher[ok])
    ok &= cond <= COND_LIMIT
    out = np.full(score.shape, np.nan)
    if np.any(ok):
        out[ok] = -np.linalg.solve(fisher[ok], score[ok][..., None])[..., 0]
    return out, cond


# -- decomposition into remainder and martingale ------------------------------------


@dataclass
class ErrorDecomposition:
    theta_x: np.ndarray
    fisher: np.ndarray
    remainder: np.ndarray  # R = sum w_k int G_k <X, ((theta - theta(x)).grad + phi) K_k> dt
    martingale: np.ndarray  # M, with M ||K|| = sum w_k int G_k d(innovation_k)
    kernel_norm: float

    @property
    def reconstructed(self) -> np.ndarray:
        return (self.theta_x + np.linalg.solve(self.fisher, self.remainder)
                - np.linalg.solve(self.fisher, self.martingale * self.kernel_norm))


def error_decomposition(stats: LocalStatistics, ws, theta_x, kernel_norm: float) -> ErrorDecomposition:
    """Split ``theta_hat - theta(x)`` into remainder and martingale parts.

    ``stats.extra`` must hold ``"adjoint"`` (``sum G_j <X_j, A* K_k>_h dt``) and
    ``"remainder"`` (``sum G_j <X_j, ((theta - theta(x)).grad + phi) K_k>_h dt``)
    accumulated with the true coefficients.
    """
    w = _w(ws)
    fisher = np.einsum("k,kij->ij", w, stats.fisher)
    rem = w @ stats.extra["remainder"]
    mart_k = w @ (stats.ito_grad - stats.extra["adjoint"])
    return ErrorDecomposition(np.atleast_1d(np.asarray(theta_x, dtype=float)), fisher, rem,
                              mart_k / kernel_norm, kernel_norm)


# -- extension to the whole domain and integrated risk ------------------------------


def project_to_box(x, box) -> np.ndarray:
    """Euclidean projection onto ``[l, r]^d`` (componentwise clamp)."""
    lo, hi = box
    return np.clip(np.asarray(x, dtype=float), lo, hi)


def extend_estimate(estimate_fn: Callable, x, box) -> np.ndarray:
    """Estimate at the point of ``box`` closest to ``x``."""
    return np.asarray(estimate_fn(project_to_box(x, box)))


def midpoint_grid(n: int, dim: int) -> tuple[np.ndarray, float]:
    """Cell midpoints of the unit cube, shape ``(n^dim, dim)``, and the cell volume."""
    axis = (np.arange(n) + 0.5) / n
    if dim == 1:
        return axis[:, None], 1.0 / n
    g0, g1 = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([g0.ravel(), g1.ravel()], axis=-1), 1.0 / n**2


@dataclass
class IntegratedRiskResult:
    value: np.ndarray  # per component, over the whole domain
    interior: np.ndarray
    boundary: np.ndarray
    box: tuple
    d_max_sq: float
    n_quad: int = 0
    extra: dict = field(default_factory=dict)


def integrated_risk(estimate_fn: Callable, theta_true: Callable, box, n_quad: int = 200,
                    dim: int = 1) -> IntegratedRiskResult:
    """Midpoint rule for ``int (theta_hat - theta)^2`` over the unit cube.

    ``estimate_fn`` maps an array of points in ``box`` (shape ``(n, d)``) to
    estimates of shape ``(n, d)``; points outside ``box`` are projected first.
    """
    pts, vol = midpoint_grid(n_quad, dim)
    proj = project_to_box(pts, box)
    uniq, inverse = np.unique(proj, axis=0, return_inverse=True)
    est = np.asarray(estimate_fn(uniq), dtype=float).reshape(len(uniq), dim)[inverse.ravel()]
    err2 = (est - np.asarray(theta_true(pts)).reshape(len(pts), dim)) ** 2
    lo, hi = box
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    interior = err2[inside].sum(axis=0) * vol
    boundary = err2[~inside].sum(axis=0) * vol
    d_max_sq = float(max(lo, 1.0 - hi) ** 2 * dim) if (lo > 0 or hi < 1) else 0.0
    return IntegratedRiskResult(interior + boundary, interior, boundary, (lo, hi), d_max_sq, n_quad)


def estimate_rows(est: VelocityEstimate, theta_true, *, replicate: int, delta: float):
    """CSV rows ``replicate, delta, h, x, component, theta_hat, theta_true, fisher_cond, a_used``."""
    rows = []
    xs = ";".join(repr(float(v)) for v in np.atleast_1d(est.x))
    for i, (th, tt) in enumerate(zip(est.theta_hat, np.atleast_1d(theta_true))):
        rows.append([replicate, repr(delta), repr(est.h), xs, i,
                     repr(float(th)), repr(float(tt)), repr(est.cond), repr(est.a_used)])
    return rows


def write_estimates_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "delta", "h", "x", "component", "theta_hat", "theta_true",
                    "fisher_cond", "a_used"])
        w.writerows(rows)
