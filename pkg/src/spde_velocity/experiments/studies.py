"""Monte Carlo studies built on :mod:`.engine`: convergence rate in ``delta``,
bandwidth sweep, estimated trajectories and integrated risk."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..estimator import EstimationError, estimate_a, estimate_many, integrated_risk, midpoint_grid, project_to_box
from ..fields import make_bump_alternative  # noqa: F401  (re-exported)
from ..weights import DegenerateDesignError, WeightConfig, compute_weights
from .config import HRule, StudyConfig
from .engine import Cell, simulate_cells

log = logging.getLogger(__name__)

FAILURE_LIMIT = 0.10


class StudyInvalidError(RuntimeError):
    """More than 10% of the replicates in some cell failed."""


# -- log-log slope ------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    n: int

    @property
    def stderr_defined(self) -> bool:
        return self.n >= 3


def fit_loglog_slope(pairs) -> SlopeFit:
    """OLS of ``log y`` on ``log x`` for ``(x, y)`` pairs.

    With two pairs the slope is exact and ``stderr`` is NaN.
    """
    arr = np.asarray(list(pairs), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise ValueError("need at least two (x, y) pairs")
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError("log-log fit needs finite positive values")
    lx, ly = np.log(arr[:, 0]), np.log(arr[:, 1])
    n = len(arr)
    xc = lx - lx.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (ly - ly.mean()) / sxx)
    intercept = float(ly.mean() - slope * lx.mean())
    if n < 3:
        return SlopeFit(slope, float("nan"), intercept, n)
    resid = ly - intercept - slope * lx
    stderr = math.sqrt(float(resid @ resid) / (n - 2) / sxx)
    return SlopeFit(slope, stderr, intercept, n)


# -- per-cell aggregation ------------------------------------------------------------


@dataclass
class ErrorSummary:
    rmse: float
    bias: float
    std: float  # sample standard deviation (ddof=1); NaN when fewer than 2 replicates
    n_ok: int
    n_fail: int

    @property
    def std_defined(self) -> bool:
        return self.n_ok >= 2

    @property
    def failure_rate(self) -> float:
        total = self.n_ok + self.n_fail
        return self.n_fail / total if total else 1.0

    @property
    def valid(self) -> bool:
        return self.n_ok > 0 and self.failure_rate <= FAILURE_LIMIT


def summarize_errors(errors) -> ErrorSummary:
    """``RMSE^2 = bias^2 + std^2 (n-1)/n`` holds by construction."""
    e = np.asarray(errors, dtype=float)
    ok = e[np.isfinite(e)]
    n_fail = e.size - ok.size
    if ok.size == 0:
        return ErrorSummary(float("nan"), float("nan"), float("nan"), 0, n_fail)
    std = float(np.std(ok, ddof=1)) if ok.size > 1 else float("nan")
    return ErrorSummary(float(np.sqrt(np.mean(ok**2))), float(np.mean(ok)), std, int(ok.size), int(n_fail))


def weight_rows(points, locations, h: float, V: str) -> tuple[np.ndarray, np.ndarray]:
    """Weight matrix ``(n_points, N)``; rows of degenerate designs are NaN."""
    points = np.asarray(points, dtype=float).reshape(-1, locations.shape[1])
    W = np.full((len(points), len(locations)), np.nan)
    ok = np.zeros(len(points), dtype=bool)
    cfg = WeightConfig(h, V)
    for i, x in enumerate(points):
        try:
            W[i] = compute_weights(x, locations, cfg).w
            ok[i] = True
        except DegenerateDesignError:
            pass
    return W, ok


def _estimates(cell: Cell, W: np.ndarray, ok_rows: np.ndarray, a_of, with_cond: bool = False):
    """Estimates of shape ``(R, n_points, d)``; NaN for failed replicates or designs.

    With ``with_cond`` also returns the Fisher condition numbers ``(R, n_points)``.
    """
    d = cell.grid.d
    out = np.full((len(cell.stats), len(W), d), np.nan)
    conds = np.full((len(cell.stats), len(W)), np.nan)
    for r, s in enumerate(cell.stats):
        if s is None or not np.any(ok_rows):
            continue
        a = a_of(s)
        if a is None:
            continue
        est, cond = estimate_many(s, W[ok_rows], a)
        out[r, ok_rows] = est
        conds[r, ok_rows] = cond
    return (out, conds) if with_cond else out


def _a_hat(s):
    try:
        return estimate_a(s)
    except EstimationError:
        return None


# -- rate study ---------------------------------------------------------------------


@dataclass
class RateCell:
    rule: str
    estimator: str
    delta: float
    N: int
    h: float
    x: tuple
    component: int
    summary: ErrorSummary
    qv_scaled: float  # mean of trace([M]_T) * N h^d
    a_hat_mean: float
    a_hat_std: float


@dataclass
class RateStudyResult:
    cells: list
    slopes: dict  # (rule, estimator, point, component) -> SlopeFit | None
    seeds: dict  # delta_index -> list of seeds
    estimates: list = field(default_factory=list)  # CSV rows
    grids: dict = field(default_factory=dict)  # delta -> (M, n_t)
    risk: dict = field(default_factory=dict)  # rule -> RiskStudyResult
    points: list = field(default_factory=list)

    @property
    def invalid_cells(self) -> list:
        return [c for c in self.cells if not c.summary.valid]

    @property
    def valid(self) -> bool:
        return not self.invalid_cells

    def slope(self, rule: str | None = None, estimator: str = "known", point: int = 0,
              component: int = 0) -> SlopeFit | None:
        rule = rule or next(iter(self.slopes))[0]
        return self.slopes.get((rule, estimator, point, component))

    def table(self, rule: str, estimator: str = "known", point: int = 0, component: int = 0) -> list:
        return [c for c in self.cells if c.rule == rule and c.estimator == estimator
                and c.x == tuple(self.points[point]) and c.component == component]


def analyze_rate(cfg: StudyConfig, cells: list[Cell], rules=None) -> RateStudyResult:
    rules = [HRule.from_dict(r) for r in (rules or cfg.h_rules)]
    truth = cfg.model_spec.theta.value(cfg.eval_points)
    d = cfg.dim
    out_cells, rows = [], []
    estimators = ["known", "plug_in"] if cfg.plug_in else ["known"]
    a_true = cfg.a
    for cell in cells:
        a_hats = np.array([np.nan if s is None or _a_hat(s) is None else _a_hat(s) for s in cell.stats])
        a_mean = float(np.nanmean(a_hats)) if np.any(np.isfinite(a_hats)) else float("nan")
        a_std = float(np.nanstd(a_hats, ddof=1)) if np.sum(np.isfinite(a_hats)) > 1 else float("nan")
        for rule in rules:
            h = rule.bandwidth(cell.delta, cell.N, d)
            W, ok_rows = weight_rows(cfg.eval_points, cell.locations, h, cfg.V)
            qv = _qv_scaled(cell, W, ok_rows, h)
            for est_name in estimators:
                a_of = (lambda s: a_true) if est_name == "known" else _a_hat
                est, cond = _estimates(cell, W, ok_rows, a_of, with_cond=True)
                for p, x in enumerate(cfg.eval_points):
                    for comp in range(d):
                        summ = summarize_errors(est[:, p, comp] - truth[p, comp])
                        out_cells.append(RateCell(rule.label, est_name, cell.delta, cell.N, h, tuple(x),
                                                  comp, summ, qv[p], a_mean, a_std))
                        for r in range(len(cell.stats)):
                            a_used = a_true if est_name == "known" else a_hats[r]
                            rows.append([rule.label, est_name, r, cell.delta, h, tuple(x), comp,
                                         est[r, p, comp], truth[p, comp], cond[r, p], a_used,
                                         cell.seeds[r]])
    slopes = {}
    for rule in rules:
        for est_name in estimators:
            for p, x in enumerate(cfg.eval_points):
                for comp in range(d):
                    sel = [c for c in out_cells if c.rule == rule.label and c.estimator == est_name
                           and c.x == tuple(x) and c.component == comp and c.summary.valid
                           and c.summary.rmse > 0]
                    try:
                        slopes[(rule.label, est_name, p, comp)] = fit_loglog_slope(
                            [(c.delta, c.summary.rmse) for c in sel])
                    except ValueError:
                        slopes[(rule.label, est_name, p, comp)] = None
    return RateStudyResult(out_cells, slopes, {c.delta_index: c.seeds for c in cells}, rows,
                           {c.delta: (c.grid.M, c.grid.n_t) for c in cells},
                           points=[tuple(x) for x in cfg.eval_points])


def _qv_scaled(cell: Cell, W, ok_rows, h) -> np.ndarray:
    """Mean over replicates of ``trace([M]_T) N h^d`` per evaluation point."""
    d = cell.grid.d
    out = np.full(len(W), np.nan)
    vals = []
    for s in cell.stats:
        if s is None:
            continue
        qv = np.einsum("pk,kii->p", np.nan_to_num(W) ** 2, s.fisher)
        vals.append(qv)
    if vals:
        out = np.mean(vals, axis=0) * cell.N * h**d
        out[~ok_rows] = np.nan
    return out


def run_rate_study(cfg: StudyConfig, *, workers: int = 1, cells: list[Cell] | None = None,
                   dump_dir=None) -> RateStudyResult:
    cells = cells if cells is not None else simulate_cells(cfg, workers=workers, dump_dir=dump_dir)
    res = analyze_rate(cfg, cells)
    if cfg.kind == "integrated_risk":
        res.risk = {r.label: analyze_risk(cfg, cells, r) for r in cfg.h_rules}
    return res


# -- bandwidth sweep ----------------------------------------------------------------


@dataclass
class SweepResult:
    delta: float
    N: int
    h: np.ndarray
    summaries: list  # ErrorSummary per h
    x: tuple
    component: int = 0
    seeds: list = field(default_factory=list)

    @property
    def rmse(self) -> np.ndarray:
        return np.array([s.rmse for s in self.summaries])

    @property
    def valid(self) -> bool:
        return all(s.valid for s in self.summaries)

    @property
    def min_rmse(self) -> float:
        r = self.rmse
        return float(np.nanmin(r)) if np.any(np.isfinite(r)) else float("nan")

    @property
    def argmin(self) -> int:
        """Index of the smallest RMSE; -1 when every bandwidth failed."""
        r = self.rmse
        return int(np.nanargmin(r)) if np.any(np.isfinite(r)) else -1

    @property
    def left_ratio(self) -> float:
        return float(self.rmse[0] / self.min_rmse)

    @property
    def right_ratio(self) -> float:
        return float(self.rmse[-1] / self.min_rmse)

    def u_shape(self, factor: float = 1.2) -> bool:
        """Both grid ends exceed the minimum by ``factor`` and the minimum is interior."""
        i = self.argmin
        return bool(0 < i < len(self.h) - 1 and self.left_ratio >= factor and self.right_ratio >= factor)


def analyze_sweep(cfg: StudyConfig, cell: Cell, point: int = 0, component: int = 0) -> SweepResult:
    x = cfg.eval_points[point]
    truth = cfg.model_spec.theta.value(x[None, :])[0, component]
    summaries = []
    for h in cfg.h_grid:
        W, ok_rows = weight_rows(x, cell.locations, h, cfg.V)
        est = _estimates(cell, W, ok_rows, lambda s: cfg.a)
        summaries.append(summarize_errors(est[:, 0, component] - truth))
    return SweepResult(cell.delta, cell.N, np.asarray(cfg.h_grid), summaries, tuple(x), component,
                       cell.seeds)


def run_bandwidth_sweep(cfg: StudyConfig, *, workers: int = 1, cells=None, dump_dir=None) -> SweepResult:
    cells = cells if cells is not None else simulate_cells(cfg, workers=workers, dump_dir=dump_dir)
    return analyze_sweep(cfg, cells[0])


# -- trajectory ---------------------------------------------------------------------


@dataclass
class TrajectoryResult:
    x: np.ndarray  # (n_eval, d)
    truth: np.ndarray  # (n_eval, d)
    estimates: dict  # delta -> (R, n_eval, d)
    h: dict  # delta -> bandwidth
    seeds: dict
    field_frames: np.ndarray | None = None
    field_times: np.ndarray | None = None
    field_delta: float | None = None

    def sup_errors(self, delta: float) -> np.ndarray:
        """Per-replicate ``max_x |theta_hat - theta|`` (NaN rows dropped)."""
        err = np.abs(self.estimates[delta] - self.truth[None])
        return np.nanmax(err.reshape(len(err), -1), axis=1)

    def median_sup_error(self, delta: float) -> float:
        return float(np.nanmedian(self.sup_errors(delta)))


def box_points(box, n: int, dim: int) -> np.ndarray:
    axis = np.linspace(box[0], box[1], n)
    if dim == 1:
        return axis[:, None]
    g0, g1 = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([g0.ravel(), g1.ravel()], axis=-1)


def analyze_trajectory(cfg: StudyConfig, cells: list[Cell], rule: HRule | None = None) -> TrajectoryResult:
    rule = rule or cfg.h_rules[0]
    xs = box_points(cfg.box, cfg.n_eval, cfg.dim)
    truth = cfg.model_spec.theta.value(xs)
    ests, hs = {}, {}
    for cell in cells:
        h = rule.bandwidth(cell.delta, cell.N, cfg.dim)
        W, ok_rows = weight_rows(xs, cell.locations, h, cfg.V)
        ests[cell.delta] = _estimates(cell, W, ok_rows, lambda s: cfg.a)
        hs[cell.delta] = h
    first = cells[0]
    return TrajectoryResult(xs, truth, ests, hs, {c.delta: c.seeds for c in cells},
                            first.field_frames, first.field_times, first.delta)


def run_trajectory(cfg: StudyConfig, *, workers: int = 1, cells=None, dump_dir=None) -> TrajectoryResult:
    cells = cells if cells is not None else simulate_cells(cfg, workers=workers,
                                                           record_field=cfg.record_field, dump_dir=dump_dir)
    return analyze_trajectory(cfg, cells)


# -- integrated risk ----------------------------------------------------------------


@dataclass
class RiskStudyResult:
    rule: str
    deltas: list
    h: list
    interior: np.ndarray  # (n_delta, R) summed over components; NaN for failures
    boundary: np.ndarray
    total: np.ndarray
    d_max_sq: float
    box: tuple

    def mean_interior(self) -> np.ndarray:
        return np.nanmean(self.interior, axis=1)

    def slope(self) -> SlopeFit | None:
        m = self.mean_interior()
        pairs = [(d, v) for d, v in zip(self.deltas, m) if np.isfinite(v) and v > 0]
        try:
            return fit_loglog_slope(pairs)
        except ValueError:
            return None


def analyze_risk(cfg: StudyConfig, cells: list[Cell], rule: HRule | None = None) -> RiskStudyResult:
    rule = rule or cfg.h_rules[0]
    pts, _ = midpoint_grid(cfg.n_quad, cfg.dim)
    uniq = np.unique(project_to_box(pts, cfg.box), axis=0)
    interior, boundary, total, hs = [], [], [], []
    d_max_sq = 0.0
    for cell in cells:
        h = rule.bandwidth(cell.delta, cell.N, cfg.dim)
        hs.append(h)
        W, ok_rows = weight_rows(uniq, cell.locations, h, cfg.V)
        lookup = {tuple(p): i for i, p in enumerate(uniq)}
        row_i, row_b, row_t = [], [], []
        for s in cell.stats:
            if s is None or not np.all(ok_rows):
                row_i.append(np.nan), row_b.append(np.nan), row_t.append(np.nan)
                continue
            est, _ = estimate_many(s, W, cfg.a)

            def fn(q, est=est):
                return est[[lookup[tuple(p)] for p in q]]

            res = integrated_risk(fn, cfg.model_spec.theta.value, cfg.box, cfg.n_quad, cfg.dim)
            d_max_sq = res.d_max_sq
            row_i.append(float(np.sum(res.interior)))
            row_b.append(float(np.sum(res.boundary)))
            row_t.append(float(np.sum(res.value)))
        interior.append(row_i), boundary.append(row_b), total.append(row_t)
    return RiskStudyResult(rule.label, [c.delta for c in cells], hs, np.array(interior), np.array(boundary),
                           np.array(total), d_max_sq, cfg.box)


def run_integrated_risk(cfg: StudyConfig, *, workers: int = 1, cells=None, dump_dir=None) -> RiskStudyResult:
    cells = cells if cells is not None else simulate_cells(cfg, workers=workers, dump_dir=dump_dir)
    return analyze_risk(cfg, cells)
