"""Local-linear weights ``w_k(x)`` for pooling local estimates.

    w_k(x) = (N h^d)^{-1} U(0)^T B^{-1} U(u_k) V(u_k),   u_k = (x_k - x) / h,
    B      = (N h^d)^{-1} sum_k U(u_k) U(u_k)^T V(u_k),  U(u) = (1, u_1, ..., u_d).

The weights reproduce affine functions exactly: ``sum w_k = 1`` and
``sum (x_k - x) w_k = 0``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

V_KERNELS = ("epanechnikov", "rectangular")


class WeightError(ValueError):
    pass


class DegenerateDesignError(WeightError):
    pass


def eval_V(name: str, u) -> np.ndarray:
    """Smoothing kernel ``V`` at points ``u``; product form over the last axis
    when ``u`` has shape ``(n, d)`` with ``d > 1``.

    Parameters
    ----------
    name : {"epanechnikov", "rectangular"}
        ``0.75 (1 - y^2) 1(|y| <= 1)`` or ``1(-1/2 <= y <= 1/2)``.
    u : array_like
        Scalars, or points with the coordinate on the last axis.
    """
    u = np.asarray(u, dtype=float)
    if name == "epanechnikov":
        v = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u**2), 0.0)
    elif name == "rectangular":
        v = ((u >= -0.5) & (u <= 0.5)).astype(float)
    else:
        raise WeightError(f"unknown smoothing kernel {name!r}; choose from {V_KERNELS}")
    if u.ndim >= 2:
        return np.prod(v, axis=-1)
    return v


@dataclass(frozen=True)
class WeightConfig:
    h: float
    V: str = "epanechnikov"
    ridge: float = 0.0
    eig_tol: float = 1e-12

    def __post_init__(self):
        if not self.h > 0:
            raise WeightError(f"bandwidth must be positive, got {self.h}")
        if self.V not in V_KERNELS:
            raise WeightError(f"unknown smoothing kernel {self.V!r}; choose from {V_KERNELS}")
        if self.ridge < 0:
            raise WeightError("ridge must be non-negative")


@dataclass(frozen=True)
class WeightSet:
    x: np.ndarray
    w: np.ndarray
    h: float
    min_eig: float
    n_active: int
    reproducing: bool = True

    @property
    def active(self) -> np.ndarray:
        return self.w != 0


def _as_design(x, locations):
    locations = np.asarray(locations, dtype=float)
    if locations.ndim == 1:
        locations = locations[:, None]
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (locations.shape[1],):
        raise WeightError("evaluation point and locations have different dimensions")
    return x, locations


def compute_weights(x, locations, config: WeightConfig) -> WeightSet:
    """Weights of all ``N`` locations for the estimate at ``x``.

    Raises
    ------
    DegenerateDesignError
        If the smallest eigenvalue of ``B`` is below ``config.eig_tol`` and no
        ridge is configured.
    """
    x, locs = _as_design(x, locations)
    N, d = locs.shape
    h = config.h
    u = (locs - x) / h
    V = eval_V(config.V, u if d > 1 else u[:, 0])
    U = np.hstack([np.ones((N, 1)), u])
    scale = 1.0 / (N * h**d)
    B = scale * (U.T * V) @ U
    eig = np.linalg.eigvalsh(B)
    n_active = int(np.count_nonzero(V))
    reproducing = True
    if eig[0] < config.eig_tol:
        if config.ridge == 0:
            raise DegenerateDesignError(
                f"singular local design at x={x.tolist()}: {n_active} active locations, "
                f"min eigenvalue {eig[0]:.3g}")
        log.warning("ridge %.3g applied at x=%s (min eigenvalue %.3g)", config.ridge, x.tolist(), eig[0])
        B = B + config.ridge * np.eye(d + 1)
        reproducing = False
    e0 = np.linalg.solve(B, np.eye(d + 1)[0])
    w = scale * (U @ e0) * V
    return WeightSet(x, w, h, float(eig[0]), n_active, reproducing)


def scaled_weights(ws: WeightSet, factor: float) -> WeightSet:
    return WeightSet(ws.x, ws.w * factor, ws.h, ws.min_eig, ws.n_active, ws.reproducing)


@dataclass
class WeightReport:
    max_scaled: float  # max |w_k| N h^d
    abs_sum: float
    sum_residual: float
    moment_residual: np.ndarray  # |sum (x_k - x)_i w_k| per axis
    support_violations: int
    C_star: float
    passed: bool
    failures: list = field(default_factory=list)


def validate_weights(ws: WeightSet, locations, C_star: float = 10.0, tol: float = 1e-10) -> WeightReport:
    """Check boundedness, absolute summability, locality and order-1 reproduction.

    Locality uses the sup-norm distance, matching the product support of ``V``.
    """
    x, locs = _as_design(ws.x, locations)
    N, d = locs.shape
    w = np.asarray(ws.w, dtype=float)
    diff = locs - x
    max_scaled = float(np.max(np.abs(w)) * N * ws.h**d)
    abs_sum = float(np.sum(np.abs(w)))
    sum_res = float(abs(np.sum(w) - 1.0))
    mom_res = np.abs(diff.T @ w)
    far = np.max(np.abs(diff), axis=1) > ws.h * (1 + 1e-12)
    violations = int(np.count_nonzero(far & (w != 0)))
    failures = []
    if max_scaled > C_star:
        failures.append("sup bound")
    if abs_sum > C_star:
        failures.append("absolute sum")
    if sum_res >= tol:
        failures.append("sum to one")
    if np.any(mom_res >= tol * max(ws.h, 1.0)):
        failures.append("first moment")
    if violations:
        failures.append("support")
    return WeightReport(max_scaled, abs_sum, sum_res, mom_res, violations, C_star, not failures, failures)


def weights_to_csv(weight_sets, path) -> None:
    """Rows ``x, k, w_k, active``; ``x`` is written as ``;``-joined coordinates in d > 1."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "k", "w_k", "active"])
        for ws in weight_sets:
            xs = ";".join(repr(float(v)) for v in ws.x)
            for k, wk in enumerate(ws.w):
                out.writerow([xs, k, repr(float(wk)), int(wk != 0)])
