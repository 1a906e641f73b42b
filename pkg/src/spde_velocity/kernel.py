"""Point-spread functions for local measurements.

A base function ``Kbar`` with compact support is stored as polynomial
coefficient arrays.  The measurement kernel is ``K = -Laplace(Kbar)`` and every
derivative of ``K`` used downstream is precomputed exactly with
``numpy.polynomial``.  Localisation follows

    K_{delta,x}(u) = delta**(-d/2) * K((u - x) / delta),

and derivatives of the localised kernel pick up a further ``delta**(-|alpha|)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P


class KernelError(ValueError):
    """Invalid kernel description."""


class FisherQuadratureError(RuntimeError):
    """The Fourier-side quadrature for the Fisher limit did not converge."""


@dataclass(frozen=True)
class Piece:
    """One polynomial piece of ``Kbar``.

    In one dimension ``coef`` is a 1-d monomial coefficient array valid on
    ``[lo, hi]``.  In two dimensions ``coef`` is a 2-d array (``coef[i, j]``
    multiplies ``y0**i * y1**j``) valid on the closed support ball, and
    ``lo``/``hi`` are unused.
    """

    coef: np.ndarray
    lo: float = -math.inf
    hi: float = math.inf


@dataclass(frozen=True)
class BaseKernel:
    """Compactly supported ``Kbar`` in ``d = 1`` or ``d = 2``.

    ``radius`` is the support radius r_K: ``Kbar(y) = 0`` for ``|y| >= r_K``.
    ``parity`` is ``"even"`` or ``"odd"``.
    """

    dim: int
    radius: float
    pieces: tuple[Piece, ...]
    parity: str = "even"
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise KernelError(f"dimension must be 1 or 2, got {self.dim}")
        if self.radius <= 0:
            raise KernelError("support radius must be positive")
        if self.parity not in ("even", "odd"):
            raise KernelError(f"parity must be 'even' or 'odd', got {self.parity!r}")
        if not self.pieces:
            raise KernelError("at least one polynomial piece is required")
        if self.dim == 2 and len(self.pieces) != 1:
            raise KernelError("two-dimensional kernels use a single piece on the support ball")
        if self.dim == 1:
            edges = [self.pieces[0].lo] + [p.hi for p in self.pieces]
            if not math.isclose(edges[0], -self.radius) or not math.isclose(edges[-1], self.radius):
                raise KernelError("pieces must cover [-r_K, r_K] exactly")
            for left, right in zip(self.pieces[:-1], self.pieces[1:]):
                if not math.isclose(left.hi, right.lo):
                    raise KernelError("pieces must be contiguous")
        self._check_smoothness()
        self._check_parity()

    # -- derived coefficient arrays -------------------------------------------------

    def _lap(self, c: np.ndarray) -> np.ndarray:
        if self.dim == 1:
            return P.polyder(c, 2)
        out = np.zeros(c.shape)
        d0 = P.polyder(c, 2, axis=0)
        d1 = P.polyder(c, 2, axis=1)
        out[: d0.shape[0], : d0.shape[1]] += d0
        out[: d1.shape[0], : d1.shape[1]] += d1
        return out

    def _der(self, c: np.ndarray, alpha: tuple[int, ...]) -> np.ndarray:
        for axis, m in enumerate(alpha):
            if m:
                c = P.polyder(c, m, axis=axis) if self.dim == 2 else P.polyder(c, m)
        return c

    @cached_property
    def _k_coef(self) -> list[np.ndarray]:
        return [-self._lap(np.asarray(p.coef, dtype=float)) for p in self.pieces]

    def _alpha(self, alpha) -> tuple[int, ...]:
        if isinstance(alpha, (int, np.integer)):
            if self.dim != 1:
                raise KernelError("integer derivative order is only meaningful for d=1")
            alpha = (int(alpha),)
        alpha = tuple(int(a) for a in alpha)
        if len(alpha) != self.dim or min(alpha) < 0:
            raise KernelError(f"bad multi-index {alpha} for d={self.dim}")
        return alpha

    def derivative_coef(self, alpha) -> list[np.ndarray]:
        """Coefficient arrays of ``D^alpha K`` per piece."""
        alpha = self._alpha(alpha)
        cache = self.__dict__.setdefault("_dcache", {})
        if alpha not in cache:
            cache[alpha] = [self._der(c, alpha) for c in self._k_coef]
        return cache[alpha]

    @cached_property
    def _lapk_coef(self) -> list[np.ndarray]:
        return [self._lap(c) for c in self._k_coef]

    # -- evaluation -----------------------------------------------------------------

    def _points(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.dim == 1:
            return y
        if y.shape[-1] != 2:
            raise KernelError("two-dimensional kernels expect points with last axis of length 2")
        return y

    def _eval_coefs(self, coefs: list[np.ndarray], y) -> np.ndarray:
        y = self._points(y)
        if self.dim == 1:
            out = np.zeros(y.shape)
            inside = np.abs(y) < self.radius
            if len(coefs) == 1:
                out[inside] = P.polyval(y[inside], coefs[0])
                return out
            breaks = np.array([p.hi for p in self.pieces[:-1]])
            idx = np.searchsorted(breaks, y, side="right")
            for i, c in enumerate(coefs):
                sel = inside & (idx == i)
                out[sel] = P.polyval(y[sel], c)
            return out
        r2 = np.sum(y * y, axis=-1)
        out = np.zeros(r2.shape)
        inside = r2 < self.radius**2
        out[inside] = P.polyval2d(y[..., 0][inside], y[..., 1][inside], coefs[0])
        return out

    def eval_kbar(self, y) -> np.ndarray:
        return self._eval_coefs([np.asarray(p.coef, dtype=float) for p in self.pieces], y)

    def eval_K(self, y) -> np.ndarray:
        """``K(y) = -(Laplace Kbar)(y)``; exactly zero outside the support."""
        return self._eval_coefs(self._k_coef, y)

    def eval_gradK(self, y) -> np.ndarray:
        """Gradient of ``K``; shape ``y.shape`` in d=1 and ``y.shape`` in d=2."""
        if self.dim == 1:
            return self._eval_coefs(self.derivative_coef((1,)), y)
        y = self._points(y)
        return np.stack(
            [self._eval_coefs(self.derivative_coef((1, 0)), y),
             self._eval_coefs(self.derivative_coef((0, 1)), y)],
            axis=-1,
        )

    def eval_lapK(self, y) -> np.ndarray:
        return self._eval_coefs(self._lapk_coef, y)

    def eval_derivative(self, alpha, y) -> np.ndarray:
        return self._eval_coefs(self.derivative_coef(alpha), y)

    # -- functionals ----------------------------------------------------------------

    def l2_norm(self, alpha=None) -> float:
        """``||D^alpha K||_{L^2}`` by exact polynomial integration.

        ``alpha`` may be an int (d=1), a multi-index, or ``"lap"`` for ``Laplace K``.
        """
        if alpha is None:
            coefs = self._k_coef
        elif isinstance(alpha, str):
            if alpha != "lap":
                raise KernelError(f"unknown derivative label {alpha!r}")
            coefs = self._lapk_coef
        else:
            coefs = self.derivative_coef(alpha)
        if self.dim == 1:
            total = 0.0
            for piece, c in zip(self.pieces, coefs):
                antider = P.polyint(P.polymul(c, c))
                total += P.polyval(piece.hi, antider) - P.polyval(piece.lo, antider)
            return math.sqrt(max(total, 0.0))
        return math.sqrt(max(_disk_integral(lambda y0, y1: P.polyval2d(y0, y1, coefs[0]) ** 2,
                                            self.radius, coefs[0].shape[0] + coefs[0].shape[1]), 0.0))

    def integral_K(self) -> float:
        """``int K(y) dy`` (zero for any valid kernel)."""
        if self.dim == 1:
            total = 0.0
            for piece, c in zip(self.pieces, self._k_coef):
                antider = P.polyint(c)
                total += P.polyval(piece.hi, antider) - P.polyval(piece.lo, antider)
            return total
        c = self._k_coef[0]
        return _disk_integral(lambda y0, y1: P.polyval2d(y0, y1, c), self.radius, c.shape[0] + c.shape[1])

    def fourier_K(self, xi) -> np.ndarray:
        """``Khat(xi) = int K(y) exp(-i xi y) dy`` for d=1 by Gauss-Legendre on each piece."""
        if self.dim != 1:
            raise KernelError("fourier_K is implemented for d=1; d=2 uses an FFT in fisher_sigma")
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        out = np.zeros(xi.shape, dtype=complex)
        nodes, weights = np.polynomial.legendre.leggauss(_FOURIER_NODES)
        for piece, c in zip(self.pieces, self._k_coef):
            half = 0.5 * (piece.hi - piece.lo)
            mid = 0.5 * (piece.hi + piece.lo)
            y = mid + half * nodes
            vals = P.polyval(y, c) * weights * half
            out += np.exp(-1j * np.outer(xi, y)) @ vals
        return out

    # -- validation -----------------------------------------------------------------

    def _check_smoothness(self):
        tol = 1e-9 * max(1.0, max(float(np.max(np.abs(p.coef))) for p in self.pieces))
        if self.dim == 1:
            for order in range(4):
                derivs = [P.polyder(np.asarray(p.coef, dtype=float), order) for p in self.pieces]
                if abs(P.polyval(self.pieces[0].lo, derivs[0])) > tol or \
                        abs(P.polyval(self.pieces[-1].hi, derivs[-1])) > tol:
                    raise KernelError(
                        f"Kbar derivative of order {order} does not vanish at the support boundary")
                for i in range(len(self.pieces) - 1):
                    b = self.pieces[i].hi
                    if abs(P.polyval(b, derivs[i]) - P.polyval(b, derivs[i + 1])) > tol:
                        raise KernelError(f"Kbar derivative of order {order} jumps at {b}")
            return
        c = np.asarray(self.pieces[0].coef, dtype=float)
        phi = np.linspace(0.0, 2 * np.pi, 17)
        y0, y1 = self.radius * np.cos(phi), self.radius * np.sin(phi)
        for order in range(4):
            for i in range(order + 1):
                d = self._der(c, (i, order - i))
                if np.max(np.abs(P.polyval2d(y0, y1, d))) > tol * 10 ** order:
                    raise KernelError(
                        f"Kbar derivative {(i, order - i)} does not vanish on the support boundary")

    def _check_parity(self):
        rng = np.random.default_rng(0)
        shape = (64,) if self.dim == 1 else (64, 2)
        y = rng.uniform(-self.radius, self.radius, size=shape) * 0.99
        a, b = self.eval_kbar(y), self.eval_kbar(-y)
        sign = 1.0 if self.parity == "even" else -1.0
        scale = max(1.0, float(np.max(np.abs(a))))
        if np.max(np.abs(a - sign * b)) > 1e-9 * scale:
            raise KernelError(f"Kbar is not {self.parity}")

    # -- serialisation --------------------------------------------------------------

    def to_dict(self) -> dict:
        if self.dim == 1:
            pieces = [{"lo": p.lo, "hi": p.hi, "coef": np.asarray(p.coef, dtype=float).tolist()}
                      for p in self.pieces]
        else:
            pieces = [{"support": "ball", "coef": np.asarray(self.pieces[0].coef, dtype=float).tolist()}]
        return {"name": self.name, "params": dict(self.params), "dim": self.dim,
                "radius": self.radius, "parity": self.parity, "pieces": pieces}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "BaseKernel":
        if "pieces" not in data:
            return make_kernel(**data)
        dim = int(data["dim"])
        pieces = tuple(
            Piece(np.asarray(p["coef"], dtype=float), p.get("lo", -math.inf), p.get("hi", math.inf))
            for p in data["pieces"])
        return cls(dim=dim, radius=float(data["radius"]), pieces=pieces,
                   parity=data.get("parity", "even"), name=data.get("name", "custom"),
                   params=dict(data.get("params", {})))

    @classmethod
    def from_json(cls, text: str) -> "BaseKernel":
        return cls.from_dict(json.loads(text))


_FOURIER_NODES = 400


def _disk_integral(f, radius: float, degree: int) -> float:
    """Integrate a polynomial of total degree <= ``2*degree`` over a disk, exactly."""
    n_r = degree + 2
    n_phi = 4 * degree + 8
    x, w = np.polynomial.legendre.leggauss(n_r)
    rho = 0.5 * radius * (x + 1)
    w_rho = 0.5 * radius * w * rho
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    R, PHI = np.meshgrid(rho, phi, indexing="ij")
    vals = f(R * np.cos(PHI), R * np.sin(PHI))
    return float(np.sum(vals * w_rho[:, None]) * 2 * np.pi / n_phi)


# -- kernel catalogue ---------------------------------------------------------------


def _poly_bump_1d(power: int, radius: float, odd: bool) -> np.ndarray:
    # (1 - (y/r)^2)^p, optionally times y/r
    base = np.array([1.0, 0.0, -1.0 / radius**2])
    c = P.polypow(base, power)
    if odd:
        c = P.polymul(c, [0.0, 1.0 / radius])
    return c


def _poly_bump_2d(power: int, radius: float, odd: bool) -> np.ndarray:
    # (1 - (y0^2 + y1^2)/r^2)^p expanded by the binomial theorem
    c = np.zeros((2 * power + 2, 2 * power + 1))
    for i in range(power + 1):
        for j in range(power + 1 - i):
            k = power - i - j
            coeff = math.factorial(power) / (math.factorial(i) * math.factorial(j) * math.factorial(k))
            c[2 * i, 2 * j] += coeff * (-1) ** (i + j) / radius ** (2 * (i + j))
    if odd:
        shifted = np.zeros_like(c)
        shifted[1:, :] = c[:-1, :] / radius
        c = shifted
    return c


def make_kernel(name: str = "poly_bump", dim: int = 1, power: int = 5, radius: float = 1.0,
                scale: float = 1.0, pieces: Sequence | None = None, **extra) -> BaseKernel:
    """Build a kernel from the catalogue.

    ``poly_bump``: ``Kbar(y) = scale * (1 - |y/r|^2)^power`` (even).
    ``odd_poly_bump``: ``Kbar(y) = scale * (y_0/r) * (1 - |y/r|^2)^power`` (odd).
    ``piecewise``: explicit ``pieces`` list (d=1).
    """
    if name in ("poly_bump", "odd_poly_bump"):
        if power < 4:
            raise KernelError("power must be >= 4 for Kbar in H^4")
        odd = name == "odd_poly_bump"
        coef = _poly_bump_1d(power, radius, odd) if dim == 1 else _poly_bump_2d(power, radius, odd)
        piece = Piece(scale * coef, -radius, radius)
        return BaseKernel(dim=dim, radius=radius, pieces=(piece,), parity="odd" if odd else "even",
                          name=name, params={"power": power, "radius": radius, "scale": scale, "dim": dim})
    if name == "piecewise":
        if pieces is None:
            raise KernelError("piecewise kernel needs 'pieces'")
        data = {"dim": dim, "radius": radius, "pieces": list(pieces), "name": name}
        parity = extra.get("parity", "even")
        data["parity"] = parity
        return BaseKernel.from_dict(data)
    raise KernelError(f"unknown kernel {name!r}")


def default_kernel(dim: int = 1) -> BaseKernel:
    return make_kernel("poly_bump", dim=dim)


# -- localisation -------------------------------------------------------------------


@dataclass(frozen=True)
class LocalizedKernel:
    """``D^alpha K_{delta,x}`` as a callable on domain points."""

    base: BaseKernel
    delta: float
    center: np.ndarray
    alpha: tuple[int, ...] | str = (0,)

    def __post_init__(self):
        if self.delta <= 0:
            raise KernelError("delta must be positive")
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))

    @property
    def order(self) -> int:
        return 2 if self.alpha == "lap" else sum(self.alpha)

    @property
    def support_radius(self) -> float:
        return self.delta * self.base.radius

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        d = self.base.dim
        y = (u - (self.center[0] if d == 1 else self.center)) / self.delta
        scale = self.delta ** (-d / 2 - self.order)
        if self.alpha == "lap":
            return scale * self.base.eval_lapK(y)
        return scale * self.base.eval_derivative(self.alpha, y)


def localized_l2_norm(lk: LocalizedKernel) -> float:
    """L^2 norm of a localised kernel; equals the base norm times ``delta**(-|alpha|)``."""
    alpha = None if lk.alpha in ((0,), (0, 0)) else lk.alpha
    return lk.base.l2_norm(alpha) * lk.delta ** (-lk.order)


# -- Fisher limit -------------------------------------------------------------------


def fisher_sigma(base: BaseKernel, T: float, a: float, *, rtol: float = 1e-10) -> np.ndarray:
    """Limit of the observed Fisher information.

    ``Sigma_ij = T/(2a) <(-Laplace)^{-1} d_i K, d_j K>``, evaluated on the
    Fourier side as ``T/(2a) (2 pi)^{-d} int xi_i xi_j |xi|^{-2} |Khat(xi)|^2 dxi``.
    """
    if T <= 0 or a <= 0:
        raise ValueError("T and a must be positive")
    if base.dim == 1:
        coarse = _fourier_power_integral(base, 48)
        fine = _fourier_power_integral(base, 96)
        if not np.isfinite(fine) or abs(fine - coarse) > max(rtol, 1e-14) * 1e3 * abs(fine):
            raise FisherQuadratureError(
                f"Fourier quadrature did not converge ({coarse} vs {fine} on refinement)")
        # integrand is even in xi: (1/2pi) * 2 * int_0^inf
        return np.array([[T / (2 * a) * fine / np.pi]])
    return _fisher_sigma_fft(base, T, a)


def _fourier_power_integral(base: BaseKernel, nodes_per_panel: int) -> float:
    """``int_0^cutoff |Khat(xi)|^2 dxi`` with panel Gauss-Legendre; the tail beyond
    ``200 / r_K`` is below double precision for H^4 kernels."""
    breaks = np.array([0.0, 2.0, 5.0, 10.0, 20.0, 35.0, 50.0, 75.0, 100.0, 150.0, 200.0]) / base.radius
    x, w = np.polynomial.legendre.leggauss(nodes_per_panel)
    total = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        xi = 0.5 * (hi - lo) * (x + 1) + lo
        total += 0.5 * (hi - lo) * float(np.sum(w * np.abs(base.fourier_K(xi)) ** 2))
    return total


def _fisher_sigma_fft(base: BaseKernel, T: float, a: float, n: int = 512, pad: float = 4.0) -> np.ndarray:
    half = pad * base.radius
    h = 2 * half / n
    g = -half + h * np.arange(n)
    Y0, Y1 = np.meshgrid(g, g, indexing="ij")
    vals = base.eval_K(np.stack([Y0, Y1], axis=-1))
    khat = np.fft.fft2(vals) * h * h
    freq = 2 * np.pi * np.fft.fftfreq(n, d=h)
    X0, X1 = np.meshgrid(freq, freq, indexing="ij")
    norm2 = X0**2 + X1**2
    norm2[0, 0] = np.inf
    power = np.abs(khat) ** 2
    dxi = (2 * np.pi / (n * h)) ** 2
    out = np.empty((2, 2))
    comps = (X0, X1)
    for i in range(2):
        for j in range(2):
            out[i, j] = np.sum(comps[i] * comps[j] / norm2 * power) * dxi / (2 * np.pi) ** 2
    out = 0.5 * (out + out.T)
    if not np.all(np.isfinite(out)):
        raise FisherQuadratureError("FFT quadrature produced non-finite values")
    return T / (2 * a) * out
