"""Finite-difference simulation of the stochastic convection-diffusion equation.

    dX = (a Laplace X + theta . grad X + c X) dt + dW   on (0, 1)^d,  X = 0 on the boundary.

Space is discretised with second-order centred differences on a uniform grid
of ``M`` interior nodes per axis.  Time stepping is the theta-method

    (I - s dt A_h) X_{j+1} = (I + (1 - s) dt A_h) X_j + xi_j,

with ``s = 1`` (implicit Euler, the default) or ``s = 1/2`` (Crank-Nicolson),
and ``xi_j`` i.i.d. ``N(0, dt / dx^d)`` per node.  The left-hand matrix is
factorised once and reused.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.linalg import splu

from .fields import PolynomialScalar, as_points, scalar_field, vector_field

log = logging.getLogger(__name__)

X0_MODES = ("zero", "explicit_field", "stationary_warmup")
NOISE_CHUNK = 32
HEADER_FORMAT = "<qqqdQ"


class ModelError(ValueError):
    """Invalid model or grid configuration."""


class SimulationError(RuntimeError):
    """Failure inside the time stepper."""


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients and horizon of the SPDE.

    ``theta`` and ``c`` are field objects from :mod:`spde_velocity.fields`;
    use :meth:`from_dict` to build them from plain dicts.
    """

    a: float
    theta: object
    c: PolynomialScalar
    T: float
    dim: int = 1
    x0_mode: str = "zero"
    x0_field: Callable | np.ndarray | None = None
    gamma_check: float | None = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ModelError("only d=1 and d=2 are supported")
        if not self.a > 0:
            raise ModelError(f"diffusivity must be positive, got {self.a}")
        if not self.T > 0:
            raise ModelError(f"time horizon must be positive, got {self.T}")
        if self.x0_mode not in X0_MODES:
            raise ModelError(f"x0_mode must be one of {X0_MODES}")
        if self.x0_mode == "explicit_field" and self.x0_field is None:
            raise ModelError("explicit_field mode needs x0_field")
        if self.x0_mode == "stationary_warmup":
            self.check_gamma()

    @classmethod
    def from_dict(cls, data: dict, dim: int | None = None) -> "ModelSpec":
        dim = int(data.get("dim", dim or 1))
        theta = vector_field(data.get("theta", {"family": "constant", "value": 0.0}), dim)
        c = scalar_field(data.get("c", 0.0), dim)
        return cls(a=float(data["a"]), theta=theta, c=c, T=float(data["T"]), dim=dim,
                   x0_mode=data.get("x0_mode", "zero"), gamma_check=data.get("gamma_check"))

    def to_dict(self) -> dict:
        return {"a": self.a, "T": self.T, "dim": self.dim, "theta": self.theta.to_spec(),
                "c": self.c.to_spec(), "x0_mode": self.x0_mode, "gamma_check": self.gamma_check}

    def replace(self, **changes) -> "ModelSpec":
        kw = {k: getattr(self, k) for k in
              ("a", "theta", "c", "T", "dim", "x0_mode", "x0_field", "gamma_check")}
        kw.update(changes)
        return ModelSpec(**kw)

    @property
    def is_pure_diffusion(self) -> bool:
        return self.theta.is_zero() and not np.any(self.c.coef)

    def damping_bound(self, n: int = 201) -> float:
        """``max (c - div theta)`` on a verification grid over the closed domain."""
        g = np.linspace(0.0, 1.0, n)
        pts = g[:, None] if self.dim == 1 else np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        return float(np.max(self.c.value(pts) - self.theta.divergence(pts)))

    def check_gamma(self) -> float | None:
        """Return the damping constant gamma < 0 for stationary start, or None
        for the theta = 0, c = 0 relaxation."""
        if self.is_pure_diffusion:
            return None
        bound = self.damping_bound()
        gamma = self.gamma_check if self.gamma_check is not None else bound
        if gamma >= 0 or bound > gamma + 1e-12:
            raise ModelError(
                f"stationary start needs c - div(theta) <= gamma < 0; max on grid is {bound:.4g}"
                + (f", gamma_check={self.gamma_check}" if self.gamma_check is not None else ""))
        return gamma


@dataclass(frozen=True)
class Grid:
    d: int
    M: int
    n_t: int
    T: float
    implicitness: float = 1.0

    def __post_init__(self):
        if self.M < 3:
            raise ModelError("need at least 3 interior points per axis")
        if self.n_t < 1:
            raise ModelError("need at least one time step")
        if not 0.5 <= self.implicitness <= 1.0:
            raise ModelError("implicitness must lie in [1/2, 1]")

    @property
    def dx(self) -> float:
        return 1.0 / (self.M + 1)

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def size(self) -> int:
        return self.M**self.d

    @property
    def cfl_ok(self) -> bool:
        """Diagnostic only; the stiff part is treated implicitly."""
        return self.dt <= self.dx

    @property
    def axis(self) -> np.ndarray:
        return self.dx * np.arange(1, self.M + 1)

    @property
    def nodes(self) -> np.ndarray:
        """Interior nodes, shape ``(M^d, d)``, row-major in the axis index."""
        if self.d == 1:
            return self.axis[:, None]
        g0, g1 = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([g0.ravel(), g1.ravel()], axis=-1)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_t + 1)


def _second_difference(M: int, dx: float) -> sp.csr_matrix:
    e = np.ones(M)
    return sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1], format="csr") / dx**2


def _centred_difference(M: int, dx: float) -> sp.csr_matrix:
    e = np.ones(M - 1)
    return sp.diags([-e, e], [-1, 1], format="csr") / (2 * dx)


def difference_operators(grid: Grid) -> tuple[sp.csr_matrix, list[sp.csr_matrix]]:
    """Dirichlet Laplacian ``L_h`` and centred partial differences ``G_h`` per axis."""
    M, dx = grid.M, grid.dx
    L1, G1 = _second_difference(M, dx), _centred_difference(M, dx)
    if grid.d == 1:
        return L1, [G1]
    eye = sp.identity(M, format="csr")
    L = sp.csr_matrix(sp.kron(L1, eye) + sp.kron(eye, L1))
    return L, [sp.csr_matrix(sp.kron(G1, eye)), sp.csr_matrix(sp.kron(eye, G1))]


def build_operator(model: ModelSpec, grid: Grid) -> sp.csr_matrix:
    """``A_h = a L_h + diag(theta) G_h + diag(c)`` with Dirichlet stencils."""
    if model.dim != grid.d:
        raise ModelError("model and grid dimensions differ")
    L, grads = difference_operators(grid)
    nodes = grid.nodes
    theta = model.theta.value(nodes)
    A = model.a * L
    for i, G in enumerate(grads):
        A = A + sp.diags(theta[:, i]) @ G
    A = A + sp.diags(model.c.value(nodes))
    return sp.csr_matrix(A)


class Stepper:
    """Factorised theta-method step for a batch of states of shape ``(M^d, R)``."""

    def __init__(self, model: ModelSpec, grid: Grid):
        self.grid = grid
        A = build_operator(model, grid)
        dt, s = grid.dt, grid.implicitness
        n = grid.size
        lhs = sp.identity(n, format="csr") - s * dt * A
        self.explicit = None if s == 1.0 else sp.csr_matrix(sp.identity(n) + (1 - s) * dt * A)
        if grid.d == 1:
            lhs = lhs.todia()
            diag = lhs.diagonal(0).copy()
            lower = lhs.diagonal(-1).copy()
            upper = lhs.diagonal(1).copy()
            dl, d, du, du2, ipiv, info = lapack.dgttrf(lower, diag, upper)
            if info != 0:
                raise SimulationError(
                    f"singular system I - dt*A_h (pivot {info}); dt={dt:.3g}, M={grid.M}")
            self._factors = (dl, d, du, du2, ipiv)
            self._lu = None
        else:
            try:
                self._lu = splu(sp.csc_matrix(lhs))
            except RuntimeError as exc:
                raise SimulationError(f"singular system I - dt*A_h: {exc}; dt={dt:.3g}, M={grid.M}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        out, info = lapack.dgttrs(*self._factors, rhs)
        if info != 0:
            raise SimulationError(f"tridiagonal solve failed with info={info}")
        return out

    def step(self, X: np.ndarray, xi: np.ndarray | None) -> np.ndarray:
        rhs = X if self.explicit is None else self.explicit @ X
        if xi is not None:
            rhs = rhs + xi
        return self.solve(np.asfortranarray(rhs))


class Observer(Protocol):
    def start(self, grid: Grid, n_rep: int) -> None: ...
    def observe(self, j: int, X: np.ndarray) -> None: ...


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    warm, main = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.Generator(np.random.PCG64(warm)), np.random.Generator(np.random.PCG64(main))


class _NoiseSource:
    """Per-replicate Gaussian streams drawn in fixed-size chunks, so each
    replicate's noise is independent of how replicates are batched."""

    def __init__(self, gens: Sequence[np.random.Generator], size: int, scale: float):
        self.gens, self.size, self.scale = gens, size, scale
        self._buf = None
        self._pos = NOISE_CHUNK

    def next(self) -> np.ndarray:
        if self._pos == NOISE_CHUNK:
            self._buf = np.stack([g.standard_normal((NOISE_CHUNK, self.size)) for g in self.gens], axis=1)
            self._buf *= self.scale
            self._pos = 0
        out = self._buf[self._pos].T  # (size, R), Fortran-ordered
        self._pos += 1
        return out


def default_burn_in(model: ModelSpec) -> float:
    gamma = model.check_gamma()
    return 5.0 / abs(gamma) if gamma is not None else 5.0 * model.T


def _initial_state(model: ModelSpec, grid: Grid, R: int, x0) -> np.ndarray:
    n = grid.size
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 1:
            x0 = np.repeat(x0[:, None], R, axis=1)
        if x0.shape != (n, R):
            raise ModelError(f"initial field must have {n} interior values")
        return np.asfortranarray(x0.copy())
    if model.x0_mode == "explicit_field":
        f = model.x0_field
        vals = np.asarray(f(grid.nodes) if callable(f) else f, dtype=float).reshape(n)
        return np.asfortranarray(np.repeat(vals[:, None], R, axis=1))
    return np.zeros((n, R), order="F")


def run_batch(model: ModelSpec, grid: Grid, seeds: Sequence[int], observers: Sequence[Observer] = (),
              *, noise: bool = True, x0=None, burn_in: float | None = None,
              stepper: Stepper | None = None) -> np.ndarray:
    """Simulate ``len(seeds)`` independent replicates side by side.

    Each observer sees ``observe(j, X)`` for ``j = 0..n_t`` with ``X`` of shape
    ``(M^d, R)``.  Returns the terminal state.  Replicate ``r`` depends only
    on ``seeds[r]``.
    """
    if abs(grid.T - model.T) > 1e-12 * model.T:
        raise ModelError("grid and model time horizons differ")
    R = len(seeds)
    stepper = stepper or Stepper(model, grid)
    scale = math.sqrt(grid.dt / grid.dx**grid.d)
    streams = [_streams(s) for s in seeds]
    X = _initial_state(model, grid, R, x0)
    if x0 is None and model.x0_mode == "stationary_warmup":
        X = _warmup(model, grid, stepper, [w for w, _ in streams], burn_in, scale, noise)
    source = _NoiseSource([m for _, m in streams], grid.size, scale) if noise else None
    for ob in observers:
        ob.start(grid, R)
    for ob in observers:
        ob.observe(0, X)
    for j in range(1, grid.n_t + 1):
        X = stepper.step(X, source.next() if source else None)
        for ob in observers:
            ob.observe(j, X)
    if not np.all(np.isfinite(X)):
        raise SimulationError("non-finite values in the simulated field")
    return X


def _warmup(model, grid, stepper, gens, burn_in, scale, noise) -> np.ndarray:
    burn_in = default_burn_in(model) if burn_in is None else burn_in
    X = np.zeros((grid.size, len(gens)), order="F")
    steps = int(math.ceil(burn_in / grid.dt - 1e-9)) if burn_in > 0 else 0
    source = _NoiseSource(gens, grid.size, scale) if noise else None
    for _ in range(steps):
        X = stepper.step(X, source.next() if source else None)
    return X


def stationary_warmup(model: ModelSpec, grid: Grid, seed: int, burn_in: float | None = None) -> np.ndarray:
    """Approximate draw from the stationary law: run the scheme from zero for
    ``burn_in`` time units (default ``5/|gamma|``, or ``5 T`` under the
    theta = 0, c = 0 relaxation)."""
    if not model.is_pure_diffusion:
        model.check_gamma()
    stepper = Stepper(model, grid)
    scale = math.sqrt(grid.dt / grid.dx**grid.d)
    return _warmup(model, grid, stepper, [_streams(seed)[0]], burn_in, scale, True)[:, 0]


class PathRecorder:
    """Stores the states of selected replicates every ``every`` steps."""

    def __init__(self, columns: Sequence[int] | None = None, every: int = 1):
        self.columns = None if columns is None else list(columns)
        self.every = every
        self.frames: list[np.ndarray] = []
        self.steps: list[int] = []

    def start(self, grid, n_rep):
        self.frames, self.steps = [], []

    def observe(self, j, X):
        if j % self.every == 0:
            cols = X if self.columns is None else X[:, self.columns]
            self.frames.append(np.array(cols.T))
            self.steps.append(j)

    def values(self) -> np.ndarray:
        """Shape ``(n_rep, n_frames, M^d)``."""
        return np.stack(self.frames, axis=1)


class PathWriter:
    """Streams one replicate's states to a binary dump in the
    :meth:`SolutionPath.dump` layout without holding the path in memory."""

    def __init__(self, path: str | Path, seed: int, column: int = 0):
        self.path, self.seed, self.column = Path(path), int(seed), column
        self._fh = None

    def start(self, grid, n_rep):
        self._fh = open(self.path, "wb")
        self._fh.write(struct.pack(HEADER_FORMAT, grid.d, grid.M, grid.n_t, grid.T,
                                   self.seed & (2**64 - 1)))
        self._last = grid.n_t

    def observe(self, j, X):
        self._fh.write(np.ascontiguousarray(X[:, self.column], dtype="<f8").tobytes())
        if j == self._last:
            self._fh.close()


@dataclass
class SolutionPath:
    grid: Grid
    values: np.ndarray  # (n_t + 1, M^d), boundary values implicitly zero
    seed: int
    model: ModelSpec | None = None
    meta: dict = field(default_factory=dict)

    def full_field(self, j: int) -> np.ndarray:
        """Field at step ``j`` including the zero boundary, shape ``(M+2,)*d``."""
        M = self.grid.M
        out = np.zeros((M + 2,) * self.grid.d)
        inner = self.values[j].reshape((M,) * self.grid.d)
        out[(slice(1, -1),) * self.grid.d] = inner
        return out

    def dump(self, path: str | Path) -> None:
        """Binary dump: little-endian int64 d, M, n_t; float64 T; uint64 seed;
        then row-major float64 values."""
        g = self.grid
        with open(path, "wb") as fh:
            fh.write(struct.pack(HEADER_FORMAT, g.d, g.M, g.n_t, g.T, int(self.seed) & (2**64 - 1)))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SolutionPath":
        with open(path, "rb") as fh:
            d, M, n_t, T, seed = struct.unpack(HEADER_FORMAT, fh.read(struct.calcsize(HEADER_FORMAT)))
            data = np.frombuffer(fh.read(), dtype="<f8")
        n_frames = data.size // (M**d)
        return cls(Grid(d, M, n_t, T), data.reshape(n_frames, M**d).copy(), seed)


def simulate(model: ModelSpec, grid: Grid, seed: int, *, noise: bool = True, x0=None,
             burn_in: float | None = None) -> SolutionPath:
    """One replicate, all time steps recorded."""
    rec = PathRecorder()
    run_batch(model, grid, [seed], [rec], noise=noise, x0=x0, burn_in=burn_in)
    return SolutionPath(grid, rec.values()[0], int(seed), model)


def grid_for(delta: float, kernel_radius: float, T: float, *, d: int = 1, ratio: float = 8.0,
             time_resolution: float = 0.002, a: float = 1.0, min_steps: int = 2000,
             implicitness: float = 1.0) -> Grid:
    """Grid meeting ``delta r_K / dx >= ratio`` with ``a dt / delta^2 <= time_resolution``."""
    M = int(math.ceil(ratio / (delta * kernel_radius) - 1e-9)) - 1
    M = max(M, 3)
    n_t = max(min_steps, int(math.ceil(a * T / (time_resolution * delta**2) - 1e-9)))
    return Grid(d, M, n_t, T, implicitness)
