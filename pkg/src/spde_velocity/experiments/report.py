"""CSV tables and SVG figures for the studies.

Every CSV starts with one ``# generated ...`` comment line carrying a
timestamp; everything after it is a deterministic function of the config.
Figures are written next to the tables as ``<study>_<panel>.svg``.
"""

from __future__ import annotations

import csv
import datetime as _dt
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .. import __version__  # noqa: E402

plt.rcParams["svg.hashsalt"] = "spde-velocity"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return ";".join(_fmt(u) for u in v)
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with open(path, "w", newline="") as fh:
        fh.write(f"# generated by spde_velocity {__version__} at {stamp}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _save(fig, path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def write_seeds(out, study: str, seeds: dict) -> Path:
    rows = [[k, r, s] for k, lst in seeds.items() for r, s in enumerate(lst)]
    return write_csv(Path(out) / f"{study}_seeds.csv", ["delta_index", "replicate", "seed"], rows)


# -- rate ---------------------------------------------------------------------------


def write_rate(res, out, study: str = "rate") -> list[Path]:
    out = Path(out)
    paths = [write_csv(
        out / f"{study}_cells.csv",
        ["rule", "estimator", "delta", "N", "h", "x", "component", "rmse", "bias", "std", "std_defined",
         "n_ok", "n_fail", "valid", "qv_scaled", "a_hat_mean", "a_hat_std"],
        [[c.rule, c.estimator, c.delta, c.N, c.h, c.x, c.component, c.summary.rmse, c.summary.bias,
          c.summary.std, c.summary.std_defined, c.summary.n_ok, c.summary.n_fail, c.summary.valid,
          c.qv_scaled, c.a_hat_mean, c.a_hat_std] for c in res.cells])]
    slope_rows = []
    for (rule, est, p, comp), fit in res.slopes.items():
        if fit is None:
            slope_rows.append([rule, est, p, comp, float("nan"), float("nan"), False, 0])
        else:
            slope_rows.append([rule, est, p, comp, fit.slope, fit.stderr, fit.stderr_defined, fit.n])
    paths.append(write_csv(out / f"{study}_slopes.csv",
                           ["rule", "estimator", "point", "component", "slope", "stderr", "stderr_defined",
                            "n_cells"], slope_rows))
    paths.append(write_csv(out / f"{study}_estimates.csv",
                           ["rule", "estimator", "replicate", "delta", "h", "x", "component", "theta_hat",
                            "theta_true", "fisher_cond", "a_used", "seed"], res.estimates))
    paths.append(write_seeds(out, study, res.seeds))
    paths.append(plot_rate(res, out / f"{study}_rmse.svg"))
    for rule, risk in res.risk.items():
        paths.extend(write_risk(risk, out, study=f"{study}_risk_{rule}"))
    return paths


def plot_rate(res, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    keys = sorted({(c.rule, c.estimator) for c in res.cells})
    for rule, est in keys:
        cells = [c for c in res.table(rule, est) if np.isfinite(c.summary.rmse)]
        if not cells:
            continue
        d = np.array([c.delta for c in cells])
        r = np.array([c.summary.rmse for c in cells])
        fit = res.slope(rule, est)
        label = f"{rule}, {est}" + (f" (slope {fit.slope:.2f})" if fit else "")
        line, = ax.loglog(d, r, "o-", label=label)
        if fit:
            ax.loglog(d, np.exp(fit.intercept) * d**fit.slope, ":", color=line.get_color())
    ax.set_xlabel(r"$\delta$")
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=7)
    return _save(fig, path)


# -- sweep --------------------------------------------------------------------------


def write_sweep(res, out, study: str = "sweep") -> list[Path]:
    out = Path(out)
    rows = [[res.delta, res.N, h, s.rmse, s.bias, s.std, s.n_ok, s.n_fail, s.failure_rate, s.valid]
            for h, s in zip(res.h, res.summaries)]
    paths = [write_csv(out / f"{study}_cells.csv",
                       ["delta", "N", "h", "rmse", "bias", "std", "n_ok", "n_fail", "failure_rate", "valid"],
                       rows)]
    paths.append(write_csv(out / f"{study}_summary.csv",
                           ["delta", "argmin_h", "min_rmse", "left_ratio", "right_ratio", "u_shape"],
                           [[res.delta, res.h[res.argmin] if res.argmin >= 0 else float("nan"), res.min_rmse,
                             res.left_ratio, res.right_ratio, res.u_shape()]]))
    paths.append(write_seeds(out, study, {0: res.seeds}))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(res.h, res.rmse, "o-")
    if res.argmin >= 0:
        ax.axvline(res.h[res.argmin], color="grey", ls=":")
    ax.set_xlabel("$h$")
    ax.set_ylabel("RMSE")
    ax.set_title(rf"$\delta$ = {res.delta:g}")
    paths.append(_save(fig, out / f"{study}_rmse.svg"))
    return paths


# -- trajectory ---------------------------------------------------------------------


def write_trajectory(res, out, study: str = "trajectory") -> list[Path]:
    out = Path(out)
    rows = []
    for delta, est in res.estimates.items():
        for r in range(est.shape[0]):
            for i, x in enumerate(res.x):
                for comp in range(est.shape[2]):
                    rows.append([delta, r, x, comp, est[r, i, comp], res.truth[i, comp]])
    paths = [write_csv(out / f"{study}_estimates.csv",
                       ["delta", "replicate", "x", "component", "theta_hat", "theta_true"], rows)]
    paths.append(write_csv(out / f"{study}_sup.csv", ["delta", "h", "median_sup_error"],
                           [[d, res.h[d], res.median_sup_error(d)] for d in res.estimates]))
    paths.append(write_seeds(out, study, dict(enumerate(res.seeds.values()))))
    if res.x.shape[1] == 1:
        fig, ax = plt.subplots(figsize=(5, 4))
        xs = res.x[:, 0]
        ax.plot(xs, res.truth[:, 0], "k-", label=r"$\theta(x)$")
        for delta, est in res.estimates.items():
            ax.plot(xs, est[0, :, 0], "-", lw=1, label=rf"$\hat\theta$, $\delta$={delta:g}")
        ax.set_xlabel("$x$")
        ax.legend(fontsize=7)
        paths.append(_save(fig, out / f"{study}_estimate.svg"))
    if res.field_frames is not None and res.x.shape[1] == 1:
        frames = res.field_frames
        M = frames.shape[1]
        full = np.zeros((frames.shape[0], M + 2))
        full[:, 1:-1] = frames
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(full.T, origin="lower", aspect="auto", cmap="RdBu_r",
                       extent=[res.field_times[0], res.field_times[-1], 0, 1])
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("$t$")
        ax.set_ylabel("$x$")
        paths.append(_save(fig, out / f"{study}_field.svg"))
    return paths


# -- integrated risk ----------------------------------------------------------------


def write_risk(res, out, study: str = "risk") -> list[Path]:
    out = Path(out)
    rows = []
    for i, d in enumerate(res.deltas):
        ok = np.isfinite(res.interior[i])
        rows.append([res.rule, d, res.h[i], float(np.nanmean(res.interior[i])),
                     float(np.nanmean(res.boundary[i])), float(np.nanmean(res.total[i])),
                     int(ok.sum()), int((~ok).sum())])
    paths = [write_csv(out / f"{study}_cells.csv",
                       ["rule", "delta", "h", "interior_mean", "boundary_mean", "total_mean", "n_ok", "n_fail"],
                       rows)]
    fit = res.slope()
    paths.append(write_csv(out / f"{study}_slopes.csv", ["rule", "slope", "stderr", "n_cells", "d_max_sq", "box"],
                           [[res.rule, fit.slope if fit else float("nan"), fit.stderr if fit else float("nan"),
                             fit.n if fit else 0, res.d_max_sq, res.box]]))
    fig, ax = plt.subplots(figsize=(5, 4))
    d = np.asarray(res.deltas)
    ax.loglog(d, res.mean_interior(), "o-", label="interior")
    ax.loglog(d, np.nanmean(res.boundary, axis=1), "s--", label="boundary strip")
    if fit:
        ax.loglog(d, np.exp(fit.intercept) * d**fit.slope, ":", label=f"slope {fit.slope:.2f}")
    ax.set_xlabel(r"$\delta$")
    ax.set_ylabel("integrated squared error")
    ax.legend(fontsize=7)
    paths.append(_save(fig, out / f"{study}_interior.svg"))
    return paths


def write_weights(rows, report_rows, out, study: str = "weights") -> list[Path]:
    out = Path(out)
    return [
        write_csv(out / f"{study}_values.csv", ["x", "k", "w_k", "active"], rows),
        write_csv(out / f"{study}_report.csv",
                  ["x", "h", "max_scaled", "abs_sum", "sum_residual", "moment_residual",
                   "support_violations", "min_eig", "n_active", "passed"], report_rows),
    ]
