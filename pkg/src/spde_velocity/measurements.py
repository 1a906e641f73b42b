"""Local measurements ``<X(t), D^alpha K_{delta, x_k}>`` of a simulated field.

Measurements are computed by midpoint quadrature over the interior grid
nodes, packaged as one sparse operator ``Phi`` so that a batch of states of
shape ``(M^d, R)`` is measured with one sparse product.  Row blocks of
``Phi`` are: value (``N`` rows), each gradient component (``N`` rows per
axis), Laplacian (``N`` rows).

Derivative measurements come in two flavours:

``"discrete"`` (default)
    ``<X, G_h k>_h`` and ``<X, L_h k>_h`` with ``k`` the sampled kernel and
    ``G_h, L_h`` the simulator's difference operators.  By summation by parts
    these equal ``-<G_h X, k>_h`` and ``<L_h X, k>_h``, so the measurements
    satisfy the discrete dynamics exactly.
``"analytic"``
    Quadrature of the exact derivatives ``D^alpha K`` at the nodes.  The
    mismatch between ``Laplace K`` and ``L_h`` at the kernel scale biases the
    diffusivity estimate by several percent unless the grid is very fine.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .kernel import BaseKernel, default_kernel
from .spde_sim import Grid, ModelSpec, SolutionPath, build_operator, difference_operators

DERIVATIVE_MODES = ("discrete", "analytic")


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementConfig:
    """Resolution ``delta``, centres ``locations`` (shape ``(N, d)``) and base kernel."""

    delta: float
    locations: np.ndarray
    kernel: BaseKernel = field(default_factory=default_kernel)
    guard_ratio: float = 8.0
    derivatives: str = "discrete"

    def __post_init__(self):
        if not self.delta > 0:
            raise MeasurementError("delta must be positive")
        if self.derivatives not in DERIVATIVE_MODES:
            raise MeasurementError(f"derivatives must be one of {DERIVATIVE_MODES}")
        d = self.kernel.dim
        locs = np.asarray(self.locations, dtype=float).reshape(-1, d)
        object.__setattr__(self, "locations", locs)
        rad = self.support_radius
        if np.any(locs - rad < -1e-12) or np.any(locs + rad > 1 + 1e-12):
            raise MeasurementError(
                f"kernel supports of radius {rad:.4g} leave the unit domain at delta={self.delta:.4g}")
        if len(locs) > 1:
            pairs = cKDTree(locs).query_pairs(2 * rad * (1 - 1e-12))
            if pairs:
                i, j = sorted(pairs)[0]
                raise MeasurementError(
                    f"overlapping kernel supports at locations {i} and {j} (delta={self.delta:.4g})")

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def support_radius(self) -> float:
        return self.delta * self.kernel.radius

    def check_resolution(self, grid: Grid) -> None:
        ratio = self.support_radius / grid.dx
        if ratio < self.guard_ratio - 1e-9:
            raise MeasurementError(
                f"grid too coarse for delta={self.delta:.4g}: {ratio:.2f} nodes per kernel radius, "
                f"need {self.guard_ratio:g}")


def max_locations(length: float, delta: float, radius: float, margin: float = 0.1) -> int:
    """Largest equidistant count on an interval of ``length`` (end points included)
    whose spacing keeps supports of radius ``delta*radius`` disjoint with ``margin``."""
    return int(math.floor(length / (2 * delta * radius * (1 + margin)) + 1e-9)) + 1


def equidistant_layout(delta: float, kernel: BaseKernel | None = None, *, interval=None,
                       n: int | None = None, margin: float = 0.1) -> np.ndarray:
    """Equidistant centres on ``interval`` (default: the unit interval shrunk by
    the support radius), maximal unless ``n`` is given.  Tensor layout in d=2."""
    kernel = kernel or default_kernel()
    rad = delta * kernel.radius
    lo, hi = interval if interval is not None else (rad, 1 - rad)
    if hi < lo:
        raise MeasurementError(f"no room for a kernel of radius {rad:.4g}")
    if n is None:
        n = max_locations(hi - lo, delta, kernel.radius, margin)
    axis = np.array([(lo + hi) / 2]) if n == 1 else np.linspace(lo, hi, n)
    if kernel.dim == 1:
        return axis[:, None]
    g0, g1 = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([g0.ravel(), g1.ravel()], axis=-1)


def _local_nodes(config: MeasurementConfig, grid: Grid, k: int):
    """Indices and coordinates of nodes inside the box around location ``k``."""
    rad, dx, M, d = config.support_radius, grid.dx, grid.M, grid.d
    c = config.locations[k]
    lo = np.maximum(np.ceil((c - rad) / dx - 1e-9).astype(int), 1)
    hi = np.minimum(np.floor((c + rad) / dx + 1e-9).astype(int), M)
    ranges = [np.arange(lo[i], hi[i] + 1) for i in range(d)]
    if d == 1:
        idx = ranges[0] - 1
        pts = (ranges[0] * dx)[:, None]
    else:
        i0, i1 = np.meshgrid(ranges[0], ranges[1], indexing="ij")
        idx = ((i0 - 1) * M + (i1 - 1)).ravel()
        pts = np.stack([i0.ravel() * dx, i1.ravel() * dx], axis=-1)
    return idx, pts


def _assemble(blocks: list[list[tuple[np.ndarray, np.ndarray]]], n_cols: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    r = 0
    for block in blocks:
        for idx, v in block:
            rows.append(np.full(idx.size, r))
            cols.append(idx)
            vals.append(v)
            r += 1
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(r, n_cols))


def _kernel_values(config: MeasurementConfig, pts: np.ndarray, k: int):
    """``K``, ``grad K`` (shape (n, d)) and ``Laplace K`` of ``K_{delta, x_k}`` at ``pts``."""
    base, delta, d = config.kernel, config.delta, config.dim
    y = (pts - config.locations[k]) / delta
    yk = y[:, 0] if d == 1 else y
    s0 = delta ** (-d / 2)
    K = s0 * base.eval_K(yk)
    G = s0 / delta * base.eval_gradK(yk)
    G = G[:, None] if d == 1 else G
    L = s0 / delta**2 * base.eval_lapK(yk)
    return K, G, L


def _value_rows(config: MeasurementConfig, grid: Grid) -> sp.csr_matrix:
    w = grid.dx**grid.d
    block = []
    for k in range(config.n_locations):
        idx, pts = _local_nodes(config, grid, k)
        block.append((idx, _kernel_values(config, pts, k)[0] * w))
    return _assemble([block], grid.size)


def measurement_operator(config: MeasurementConfig, grid: Grid) -> sp.csr_matrix:
    """Sparse ``((d + 2) N, M^d)`` quadrature operator."""
    if config.dim != grid.d:
        raise MeasurementError("measurement and grid dimensions differ")
    config.check_resolution(grid)
    if config.derivatives == "discrete":
        Phi0 = _value_rows(config, grid)
        L, grads = difference_operators(grid)
        return sp.vstack([Phi0] + [Phi0 @ G.T for G in grads] + [Phi0 @ L.T], format="csr")
    d, N, w = grid.d, config.n_locations, grid.dx**grid.d
    blocks = [[] for _ in range(d + 2)]
    for k in range(N):
        idx, pts = _local_nodes(config, grid, k)
        K, G, L = _kernel_values(config, pts, k)
        blocks[0].append((idx, K * w))
        for i in range(d):
            blocks[1 + i].append((idx, G[:, i] * w))
        blocks[d + 1].append((idx, L * w))
    return _assemble(blocks, grid.size)


def functional_operator(config: MeasurementConfig, grid: Grid, fn) -> sp.csr_matrix:
    """Rows ``<X, fn(k, pts, K, gradK, lapK)>_h`` for each location ``k``.

    ``fn`` returns the test function values at the local nodes ``pts``.
    """
    config.check_resolution(grid)
    w = grid.dx**grid.d
    block = []
    for k in range(config.n_locations):
        idx, pts = _local_nodes(config, grid, k)
        K, G, L = _kernel_values(config, pts, k)
        block.append((idx, np.asarray(fn(k, pts, K, G, L), dtype=float) * w))
    return _assemble([block], grid.size)


def adjoint_operator(config: MeasurementConfig, grid: Grid, model: ModelSpec) -> sp.csr_matrix:
    """Rows ``<X, A* K_{delta, x_k}>_h`` with ``A* z = a Lap z - theta . grad z + (c - div theta) z``.

    In discrete mode the rows are ``k^T A_h``, the exact drift of ``<X, k>_h``.
    """
    if config.derivatives == "discrete":
        return sp.csr_matrix(_value_rows(config, grid) @ build_operator(model, grid))

    def fn(k, pts, K, G, L):
        th = model.theta.value(pts)
        phi = model.theta.divergence(pts) - model.c.value(pts)
        return model.a * L - np.sum(th * G, axis=1) - phi * K
    return functional_operator(config, grid, fn)


def remainder_operator(config: MeasurementConfig, grid: Grid, model: ModelSpec, x) -> sp.csr_matrix:
    """Rows ``<X, ((theta - theta(x)) . grad + phi) K_{delta, x_k}>_h`` with
    ``phi = div theta - c``.

    In discrete mode the test function is ``sum_i G_i (theta_i k) - theta(x) . G k - c k``,
    the discrete product rule for ``div(theta K) - theta(x) . grad K - c K``.
    """
    tx = model.theta.value(np.atleast_1d(np.asarray(x, dtype=float))[None, :])[0]
    if config.derivatives == "discrete":
        Phi0 = _value_rows(config, grid)
        _, grads = difference_operators(grid)
        nodes = grid.nodes
        th = model.theta.value(nodes)
        out = -(Phi0 @ sp.diags(model.c.value(nodes)))
        for i, G in enumerate(grads):
            out = out + Phi0 @ sp.diags(th[:, i]) @ G.T - tx[i] * (Phi0 @ G.T)
        return sp.csr_matrix(out)

    def fn(k, pts, K, G, L):
        th = model.theta.value(pts) - tx
        phi = model.theta.divergence(pts) - model.c.value(pts)
        return np.sum(th * G, axis=1) + phi * K
    return functional_operator(config, grid, fn)


# -- discrete integrals --------------------------------------------------------------


def ito_sum(f, X) -> np.ndarray:
    """Left-point sum ``sum_j f[j] (X[j+1] - X[j])`` along axis 0."""
    f, X = np.asarray(f, dtype=float), np.asarray(X, dtype=float)
    if f.shape[0] != X.shape[0]:
        raise MeasurementError(f"series lengths differ: {f.shape[0]} vs {X.shape[0]}")
    if f.shape[0] < 2:
        raise MeasurementError("need at least two time points")
    return np.sum(f[:-1] * np.diff(X, axis=0), axis=0)


def time_integral(f, dt: float) -> np.ndarray:
    """Left-point sum ``sum_{j < n_t} f[j] dt`` along axis 0."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] < 2:
        raise MeasurementError("need at least two time points")
    return np.sum(f[:-1], axis=0) * dt


# -- measurement series --------------------------------------------------------------


@dataclass
class LocalMeasurementSet:
    """Series ``X`` (n_t+1, N), ``grad`` (n_t+1, N, d), ``lap`` (n_t+1, N)."""

    config: MeasurementConfig
    X: np.ndarray
    grad: np.ndarray
    lap: np.ndarray
    dt: float

    def __post_init__(self):
        n = self.X.shape[0]
        if self.grad.shape[0] != n or self.lap.shape[0] != n:
            raise MeasurementError("series lengths differ")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.grad))
                and np.all(np.isfinite(self.lap))):
            raise MeasurementError("non-finite measurement values")

    @property
    def n_t(self) -> int:
        return self.X.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_t + 1)

    def statistics(self) -> "LocalStatistics":
        g, X, L, dt = self.grad, self.X, self.lap, self.dt
        return LocalStatistics(
            fisher=time_integral(g[:, :, :, None] * g[:, :, None, :], dt),
            ito_grad=ito_sum(g, X[:, :, None]),
            lap_grad=time_integral(L[:, :, None] * g, dt),
            ito_lap=ito_sum(L, X),
            lap_sq=time_integral(L**2, dt),
            T=dt * self.n_t,
        )

    def to_csv(self, path) -> None:
        d = self.grad.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "k", "X"] + [f"X_grad_{i + 1}" for i in range(d)] + ["X_lap"])
            for j, t in enumerate(self.times):
                for k in range(self.X.shape[1]):
                    w.writerow([repr(float(t)), k, repr(float(self.X[j, k]))]
                               + [repr(float(v)) for v in self.grad[j, k]] + [repr(float(self.lap[j, k]))])


def _split(Y: np.ndarray, N: int, d: int):
    """Split stacked operator output (rows first) into value, gradient, Laplacian."""
    X = Y[:N]
    G = np.stack([Y[N * (1 + i):N * (2 + i)] for i in range(d)], axis=1)
    L = Y[N * (d + 1):N * (d + 2)]
    return X, G, L


def measure_values(values: np.ndarray, grid: Grid, config: MeasurementConfig,
                   operator: sp.csr_matrix | None = None) -> LocalMeasurementSet:
    """Measure an array of interior field values of shape ``(n_frames, M^d)``."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    Phi = measurement_operator(config, grid) if operator is None else operator
    Y = Phi @ values.T  # (rows, n_frames)
    X, G, L = _split(Y, config.n_locations, grid.d)
    return LocalMeasurementSet(config, X.T.copy(), np.transpose(G, (2, 0, 1)).copy(), L.T.copy(), grid.dt)


def measure(path: SolutionPath, config: MeasurementConfig) -> LocalMeasurementSet:
    return measure_values(path.values, path.grid, config)


@dataclass
class LocalStatistics:
    """Per-location sufficient statistics of one replicate.

    fisher   (N, d, d): sum_j G_j G_j^T dt
    ito_grad (N, d):    sum_j G_j (X_{j+1} - X_j)
    lap_grad (N, d):    sum_j L_j G_j dt
    ito_lap  (N,):      sum_j L_j (X_{j+1} - X_j)
    lap_sq   (N,):      sum_j L_j^2 dt
    """

    fisher: np.ndarray
    ito_grad: np.ndarray
    lap_grad: np.ndarray
    ito_lap: np.ndarray
    lap_sq: np.ndarray
    T: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def n_locations(self) -> int:
        return self.fisher.shape[0]

    @property
    def dim(self) -> int:
        return self.fisher.shape[1]

    def scaled(self, factor: float) -> "LocalStatistics":
        """Statistics of the field ``factor * X``."""
        f2 = factor**2
        return LocalStatistics(self.fisher * f2, self.ito_grad * f2, self.lap_grad * f2,
                               self.ito_lap * f2, self.lap_sq * f2, self.T,
                               {k: v * f2 for k, v in self.extra.items()})


class StatisticsObserver:
    """Streams :class:`LocalStatistics` for every replicate of a batch.

    ``cross`` maps a name to an extra operator ``Psi`` with ``N`` rows; the
    observer then also accumulates ``sum_j G_j (Psi X_j) dt`` under that name
    in ``LocalStatistics.extra``.  Memory is independent of ``n_t``.
    """

    def __init__(self, config: MeasurementConfig, grid: Grid, cross: dict | None = None,
                 operator: sp.csr_matrix | None = None):
        self.config, self.grid = config, grid
        self.cross_names = list(cross or {})
        Phi = measurement_operator(config, grid) if operator is None else operator
        self.n_base = Phi.shape[0]
        self.Phi = sp.vstack([Phi] + [cross[n] for n in self.cross_names], format="csr")

    def start(self, grid: Grid, n_rep: int) -> None:
        N, d = self.config.n_locations, self.grid.d
        self.R = n_rep
        self.fisher = np.zeros((d, d, N, n_rep))
        self.ito_grad = np.zeros((d, N, n_rep))
        self.lap_grad = np.zeros((d, N, n_rep))
        self.ito_lap = np.zeros((N, n_rep))
        self.lap_sq = np.zeros((N, n_rep))
        self.cross = {n: np.zeros((d, N, n_rep)) for n in self.cross_names}
        self.prev = None

    def observe(self, j: int, X: np.ndarray) -> None:
        Y = self.Phi @ X
        N, d, dt = self.config.n_locations, self.grid.d, self.grid.dt
        x, g, lap = _split(Y, N, d)
        g = g.transpose(1, 0, 2)
        if self.prev is not None:
            px, pg, plap = self.prev[:3]
            dX = x - px
            self.ito_grad += pg * dX
            self.ito_lap += plap * dX
            self.lap_grad += (plap * dt) * pg
            self.lap_sq += plap * plap * dt
            pgdt = pg * dt
            for i in range(d):
                self.fisher[i] += pgdt[i] * pg
            for n, prev_extra in zip(self.cross_names, self.prev[3]):
                self.cross[n] += pgdt * prev_extra
        extras = [Y[self.n_base + N * i:self.n_base + N * (i + 1)] for i in range(len(self.cross_names))]
        self.prev = (x, g, lap, extras)

    def statistics(self, r: int) -> LocalStatistics:
        return LocalStatistics(
            fisher=np.transpose(self.fisher[:, :, :, r], (2, 0, 1)).copy(),
            ito_grad=self.ito_grad[:, :, r].T.copy(),
            lap_grad=self.lap_grad[:, :, r].T.copy(),
            ito_lap=self.ito_lap[:, r].copy(),
            lap_sq=self.lap_sq[:, r].copy(),
            T=self.grid.T,
            extra={n: v[:, :, r].T.copy() for n, v in self.cross.items()},
        )

    def all_statistics(self) -> list[LocalStatistics]:
        return [self.statistics(r) for r in range(self.R)]


class MeasurementRecorder:
    """Records full measurement series for every replicate of a batch."""

    def __init__(self, config: MeasurementConfig, grid: Grid, operator: sp.csr_matrix | None = None):
        self.config, self.grid = config, grid
        self.Phi = measurement_operator(config, grid) if operator is None else operator

    def start(self, grid: Grid, n_rep: int) -> None:
        self.frames = []

    def observe(self, j: int, X: np.ndarray) -> None:
        self.frames.append(self.Phi @ X)

    def measurement_set(self, r: int) -> LocalMeasurementSet:
        Y = np.stack([f[:, r] for f in self.frames], axis=1)
        X, G, L = _split(Y, self.config.n_locations, self.grid.d)
        return LocalMeasurementSet(self.config, X.T.copy(), np.transpose(G, (2, 0, 1)).copy(),
                                   L.T.copy(), self.grid.dt)
