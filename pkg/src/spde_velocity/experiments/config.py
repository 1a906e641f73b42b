"""Study configuration: loading, validation and derived quantities."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from ..fields import FieldSpecError
from ..kernel import BaseKernel, KernelError, default_kernel
from ..measurements import DERIVATIVE_MODES, MeasurementConfig, MeasurementError, equidistant_layout
from ..spde_sim import Grid, ModelError, ModelSpec, grid_for
from ..weights import V_KERNELS

STUDY_KINDS = ("rate_in_delta", "bandwidth_sweep", "trajectory", "integrated_risk", "weights")
H_RULES = ("fixed", "delta_power", "n_power", "power")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HRule:
    """Bandwidth as a function of ``delta`` and ``N``.

    ``fixed``: ``h``; ``delta_power``: ``c_h delta^(d/(2 beta + d))``;
    ``n_power``: ``c_h N^(-1/(2 beta + d))``; ``power``: ``c_h delta^exponent``.
    """

    kind: str = "delta_power"
    c_h: float = 0.5
    beta: float = 2.0
    h: float | None = None
    exponent: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in H_RULES:
            raise ConfigError(f"unknown h rule {self.kind!r}; choose from {H_RULES}")
        if self.kind == "fixed" and not (self.h and self.h > 0):
            raise ConfigError("fixed h rule needs a positive h")
        if self.kind == "power" and self.exponent is None:
            raise ConfigError("power h rule needs an exponent")
        if self.c_h <= 0 or self.beta <= 0:
            raise ConfigError("c_h and beta must be positive")

    @classmethod
    def from_dict(cls, data) -> "HRule":
        if isinstance(data, HRule):
            return data
        data = dict(data)
        unknown = set(data) - {"kind", "c_h", "beta", "h", "exponent", "name"}
        if unknown:
            raise ConfigError(f"unknown h rule keys {sorted(unknown)}")
        return cls(**data)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "fixed":
            return f"fixed_{self.h:g}"
        if self.kind == "power":
            return f"power_{self.exponent:g}"
        return self.kind

    def bandwidth(self, delta: float, N: int, d: int) -> float:
        if self.kind == "fixed":
            return float(self.h)
        if self.kind == "delta_power":
            return self.c_h * delta ** (d / (2 * self.beta + d))
        if self.kind == "n_power":
            return self.c_h * N ** (-1.0 / (2 * self.beta + d))
        return self.c_h * delta**self.exponent


@dataclass(frozen=True)
class TimeConfig:
    """``n_t = max(min_steps, ceil(a T / (time_resolution delta^2)))``."""

    implicitness: float = 0.5
    time_resolution: float = 0.002
    min_steps: int = 2000
    n_t: int | None = None

    def __post_init__(self):
        if not 0.5 <= self.implicitness <= 1.0:
            raise ConfigError("implicitness must lie in [0.5, 1]")
        if not self.time_resolution > 0:
            raise ConfigError("time_resolution must be positive")


@dataclass(frozen=True)
class Layout:
    """Measurement centres: ``maximal`` equidistant packing, ``count`` equidistant
    points, or ``explicit`` coordinates."""

    mode: str = "maximal"
    interval: tuple | None = None
    n: int | None = None
    margin: float = 0.1
    points: tuple | None = None

    def __post_init__(self):
        if self.mode not in ("maximal", "count", "explicit"):
            raise ConfigError(f"unknown layout mode {self.mode!r}")
        if self.mode == "count" and not (self.n and self.n >= 1):
            raise ConfigError("count layout needs n >= 1")
        if self.mode == "explicit" and not self.points:
            raise ConfigError("explicit layout needs points")

    def locations(self, delta: float, kernel: BaseKernel) -> np.ndarray:
        if self.mode == "explicit":
            return np.asarray(self.points, dtype=float).reshape(-1, kernel.dim)
        n = self.n if self.mode == "count" else None
        return equidistant_layout(delta, kernel, interval=self.interval, n=n, margin=self.margin)


@dataclass
class StudyConfig:
    kind: str
    model: dict
    deltas: list = field(default_factory=lambda: [2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7])
    R: int = 100
    h_rules: list = field(default_factory=lambda: [HRule()])
    eval_points: list = field(default_factory=lambda: [[0.5]])
    master_seed: int = 20240607
    out_dir: str = "results"
    kernel: dict | None = None
    V: str = "epanechnikov"
    layout: Layout = field(default_factory=Layout)
    time: TimeConfig = field(default_factory=TimeConfig)
    guard_ratio: float = 8.0
    derivatives: str = "discrete"
    plug_in: bool = True
    h_grid: list | None = None
    box: tuple = (0.2, 0.8)
    n_eval: int = 25
    n_quad: int = 100
    batch_size: int = 50
    record_field: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in STUDY_KINDS:
            raise ConfigError(f"unknown study kind {self.kind!r}; choose from {STUDY_KINDS}")
        self.deltas = [float(d) for d in self.deltas]
        if not self.deltas or any(d <= 0 for d in self.deltas):
            raise ConfigError("delta grid must be non-empty and positive")
        if any(b >= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ConfigError("delta grid must be strictly decreasing")
        if int(self.R) < 1:
            raise ConfigError("R must be at least 1")
        self.R = int(self.R)
        self.h_rules = [HRule.from_dict(r) for r in self.h_rules]
        if not self.h_rules:
            raise ConfigError("at least one h rule is required")
        if self.V not in V_KERNELS:
            raise ConfigError(f"unknown smoothing kernel {self.V!r}")
        if self.derivatives not in DERIVATIVE_MODES:
            raise ConfigError(f"derivatives must be one of {DERIVATIVE_MODES}")
        if isinstance(self.layout, dict):
            self.layout = Layout(**_tuples(self.layout))
        if isinstance(self.time, dict):
            self.time = TimeConfig(**self.time)
        lo, hi = self.box
        if not 0 <= lo < hi <= 1:
            raise ConfigError("box must satisfy 0 <= l < r <= 1")
        self.box = (float(lo), float(hi))
        try:
            self.model_spec = ModelSpec.from_dict(self.model)
            self.base_kernel = default_kernel(self.dim) if not self.kernel else BaseKernel.from_dict(
                {"dim": self.dim, **self.kernel})
        except (ModelError, FieldSpecError, KernelError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model or kernel: {exc}") from exc
        if self.base_kernel.dim != self.dim:
            raise ConfigError("kernel and model dimensions differ")
        self.eval_points = np.asarray(self.eval_points, dtype=float).reshape(-1, self.dim)
        if self.kind == "bandwidth_sweep":
            if len(self.deltas) != 1:
                raise ConfigError("a bandwidth sweep uses exactly one delta")
            if not self.h_grid or len(self.h_grid) < 3:
                raise ConfigError("a bandwidth sweep needs an h grid with at least 3 values")
        if self.h_grid is not None:
            self.h_grid = [float(h) for h in self.h_grid]
            if any(h <= 0 for h in self.h_grid):
                raise ConfigError("h grid values must be positive")
        # derived N must respect the disjoint-support bound
        for d in self.deltas:
            try:
                locs = self.locations(d)
                MeasurementConfig(d, locs, self.base_kernel, self.guard_ratio, self.derivatives)
            except (ValueError, MeasurementError) as exc:
                raise ConfigError(f"invalid layout at delta={d:g}: {exc}") from exc
            bound = (1.0 / (2 * d * self.base_kernel.radius) + 1) ** self.dim
            if len(locs) > bound:
                raise ConfigError(f"{len(locs)} locations exceed the disjoint-support bound at delta={d:g}")

    @property
    def dim(self) -> int:
        return int(self.model.get("dim", 1))

    @property
    def a(self) -> float:
        return float(self.model["a"])

    @property
    def T(self) -> float:
        return float(self.model["T"])

    def locations(self, delta: float) -> np.ndarray:
        return self.layout.locations(delta, self.base_kernel)

    def grid(self, delta: float) -> Grid:
        t = self.time
        if t.n_t is not None:
            g = grid_for(delta, self.base_kernel.radius, self.T, d=self.dim, ratio=self.guard_ratio,
                         implicitness=t.implicitness)
            return Grid(g.d, g.M, int(t.n_t), g.T, g.implicitness)
        return grid_for(delta, self.base_kernel.radius, self.T, d=self.dim, ratio=self.guard_ratio,
                        time_resolution=t.time_resolution, a=self.a, min_steps=t.min_steps,
                        implicitness=t.implicitness)

    def with_overrides(self, **changes) -> "StudyConfig":
        data = self.to_dict()
        data.update(changes)
        return StudyConfig.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "model": copy.deepcopy(self.model), "deltas": list(self.deltas),
            "R": self.R, "h_rules": [vars(r).copy() for r in self.h_rules],
            "eval_points": self.eval_points.tolist(), "master_seed": self.master_seed,
            "out_dir": self.out_dir, "kernel": self.kernel, "V": self.V,
            "layout": {k: v for k, v in vars(self.layout).items()}, "time": vars(self.time).copy(),
            "guard_ratio": self.guard_ratio, "derivatives": self.derivatives, "plug_in": self.plug_in,
            "h_grid": self.h_grid, "box": list(self.box), "n_eval": self.n_eval, "n_quad": self.n_quad,
            "batch_size": self.batch_size, "record_field": self.record_field, "name": self.name,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        data = dict(data)
        if "study" in data and "kind" not in data:
            data["kind"] = data.pop("study")
        if "h_rule" in data:
            data["h_rules"] = [data.pop("h_rule")]
        if isinstance(data.get("h_grid"), dict):
            data["h_grid"] = geometric_grid(**data["h_grid"])
        if isinstance(data.get("deltas"), dict):
            data["deltas"] = geometric_grid(**data["deltas"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "kind" not in data or "model" not in data:
            raise ConfigError("config needs 'kind' and 'model'")
        return cls(**data)


def _tuples(d: dict) -> dict:
    return {k: tuple(map(tuple, v)) if k == "points" and v is not None else
            (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


def geometric_grid(start: float, factor: float, n: int) -> list:
    """``start * factor^i`` for ``i = 0..n-1``; ``factor < 1`` gives a decreasing grid."""
    if n < 1 or start <= 0 or factor <= 0:
        raise ConfigError("geometric grid needs start > 0, factor > 0, n >= 1")
    return [float(start * factor**i) for i in range(int(n))]


def load_config(path) -> StudyConfig:
    """Read a TOML or JSON study file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomli.loads(raw.decode())
    except (tomli.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return StudyConfig.from_dict(data)


def replicate_seed(master: int, delta_index: int, replicate: int) -> int:
    """Index-local 64-bit seed: depends only on ``(master, delta_index, replicate)``."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(delta_index), int(replicate)))
    return int(ss.generate_state(1, np.uint64)[0])

