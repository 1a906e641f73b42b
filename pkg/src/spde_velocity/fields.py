"""Coefficient fields for the convection-diffusion operator.

Fields are described by small JSON/TOML-friendly dicts (``family`` plus
parameters) and evaluated on arrays of points with shape ``(n, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P


class FieldSpecError(ValueError):
    pass


def as_points(x, dim: int) -> np.ndarray:
    """Coerce ``x`` to shape ``(n, dim)``."""
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        return x.reshape(-1, 1)
    return x.reshape(-1, dim)


@dataclass(frozen=True)
class PolynomialScalar:
    """Scalar polynomial; ``coef`` is 1-d (d=1) or 2-d (d=2) monomial coefficients."""

    coef: np.ndarray
    dim: int = 1

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coef, dtype=float))
        if c.ndim != self.dim:
            if self.dim == 2 and c.ndim == 1 and c.size == 1:
                c = c.reshape(1, 1)
            else:
                raise FieldSpecError(f"coefficient array must have {self.dim} axes")
        object.__setattr__(self, "coef", c)

    def value(self, pts) -> np.ndarray:
        pts = as_points(pts, self.dim)
        if self.dim == 1:
            return P.polyval(pts[:, 0], self.coef)
        return P.polyval2d(pts[:, 0], pts[:, 1], self.coef)

    def partial(self, axis: int) -> "PolynomialScalar":
        if self.dim == 1:
            return PolynomialScalar(P.polyder(self.coef, 1), 1)
        return PolynomialScalar(P.polyder(self.coef, 1, axis=axis), 2)

    def gradient(self, pts) -> np.ndarray:
        return np.stack([self.partial(i).value(pts) for i in range(self.dim)], axis=-1)

    def to_spec(self) -> dict:
        return {"family": "polynomial", "coefficients": self.coef.tolist()}


@dataclass(frozen=True)
class PolynomialVector:
    components: tuple[PolynomialScalar, ...]

    @property
    def dim(self) -> int:
        return len(self.components)

    def value(self, pts) -> np.ndarray:
        return np.stack([c.value(pts) for c in self.components], axis=-1)

    def divergence(self, pts) -> np.ndarray:
        return sum(c.partial(i).value(pts) for i, c in enumerate(self.components))

    def is_zero(self) -> bool:
        return all(not np.any(c.coef) for c in self.components)

    def to_spec(self) -> dict:
        return {"family": "polynomial", "coefficients": [c.coef.tolist() for c in self.components]}


def smooth_bump(u) -> np.ndarray:
    """``V(u) = exp(-1 / (1 - |2u|^2))`` on ``|u| < 1/2``, zero elsewhere; ``u`` has shape (n, d)."""
    s = 4.0 * np.sum(np.asarray(u) ** 2, axis=-1)
    out = np.zeros(s.shape)
    inside = s < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside]))
    return out


def smooth_bump_gradient(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    s = 4.0 * np.sum(u**2, axis=-1)
    out = np.zeros(u.shape)
    inside = s < 1.0
    q = 1.0 - s[inside]
    v = np.exp(-1.0 / q)
    out[inside] = (v * (-8.0) / q**2)[:, None] * u[inside]
    return out


def smooth_bump_laplacian(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    d = u.shape[-1]
    r2 = np.sum(u**2, axis=-1)
    s = 4.0 * r2
    out = np.zeros(s.shape)
    inside = s < 1.0
    q = 1.0 - s[inside]
    v = np.exp(-1.0 / q)
    grad_g2 = 64.0 * r2[inside] / q**4
    lap_g = -8.0 * d / q**2 - 128.0 * r2[inside] / q**3
    out[inside] = v * (grad_g2 + lap_g)
    return out


@dataclass(frozen=True)
class BumpVector:
    """Gradient of the potential ``c4 h^(beta+1) V((y - x)/h)``.

    The field is ``c4 h^beta (grad V)((y - x)/h)`` and vanishes outside the
    ball of radius ``h/2`` around ``x``.
    """

    center: np.ndarray
    h: float
    beta: float
    c4: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if self.h <= 0:
            raise FieldSpecError("bump bandwidth must be positive")

    @property
    def dim(self) -> int:
        return self.center.size

    def _u(self, pts):
        return (as_points(pts, self.dim) - self.center) / self.h

    def potential(self, pts) -> np.ndarray:
        return self.c4 * self.h ** (self.beta + 1) * smooth_bump(self._u(pts))

    def value(self, pts) -> np.ndarray:
        return self.c4 * self.h**self.beta * smooth_bump_gradient(self._u(pts))

    def divergence(self, pts) -> np.ndarray:
        return self.c4 * self.h ** (self.beta - 1) * smooth_bump_laplacian(self._u(pts))

    def is_zero(self) -> bool:
        return self.c4 == 0

    def to_spec(self) -> dict:
        return {"family": "bump", "center": self.center.tolist(), "h": self.h,
                "beta": self.beta, "c4": self.c4}


def _poly_coef(raw, dim: int) -> np.ndarray:
    c = np.asarray(raw, dtype=float)
    if dim == 2 and c.ndim == 1:
        c = c.reshape(-1, 1)
    return c


def vector_field(spec: dict, dim: int):
    """Build a velocity field from its description dict."""
    family = spec.get("family")
    if family == "constant":
        value = np.atleast_1d(np.asarray(spec.get("value", 0.0), dtype=float))
        if value.size == 1:
            value = np.repeat(value, dim)
        if value.size != dim:
            raise FieldSpecError(f"constant velocity needs {dim} components")
        shape = (1,) * dim
        return PolynomialVector(tuple(PolynomialScalar(np.full(shape, v), dim) for v in value))
    if family == "polynomial":
        coefs = spec["coefficients"]
        if dim == 1 and len(coefs) and np.ndim(coefs[0]) == 0:
            coefs = [coefs]
        if len(coefs) != dim:
            raise FieldSpecError(f"polynomial velocity needs {dim} component coefficient arrays")
        return PolynomialVector(tuple(PolynomialScalar(_poly_coef(c, dim), dim) for c in coefs))
    if family == "bump":
        field = BumpVector(spec["center"], float(spec["h"]), float(spec.get("beta", 2.0)),
                           float(spec.get("c4", 1.0)))
        if field.dim != dim:
            raise FieldSpecError("bump centre dimension does not match the model")
        return field
    raise FieldSpecError(f"unknown velocity family {family!r}")


def scalar_field(spec: dict | float | None, dim: int) -> PolynomialScalar:
    """Build a reaction field; a bare number means a constant."""
    if spec is None:
        spec = 0.0
    if isinstance(spec, (int, float)):
        return PolynomialScalar(np.full((1,) * dim, float(spec)), dim)
    family = spec.get("family")
    if family == "constant":
        return PolynomialScalar(np.full((1,) * dim, float(spec.get("value", 0.0))), dim)
    if family == "polynomial":
        return PolynomialScalar(_poly_coef(spec["coefficients"], dim), dim)
    raise FieldSpecError(f"unknown reaction family {family!r}")


def make_bump_alternative(x, h: float, beta: float = 2.0, c4: float = 1.0) -> dict:
    """Description dict for the conservative bump velocity ``c4 h^beta (grad V)((y - x)/h)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not math.isfinite(h) or h <= 0:
        raise FieldSpecError("h must be positive")
    return {"family": "bump", "center": x.tolist(), "h": float(h), "beta": float(beta), "c4": float(c4)}
