"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line with the measured quantity before
asserting.  The Monte Carlo studies are shared through module fixtures; the
full module takes roughly 15 minutes on one core.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spde_velocity.estimator import error_decomposition, weighted_augmented_mle
from spde_velocity.experiments.config import StudyConfig, load_config
from spde_velocity.experiments.engine import simulate_cell
from spde_velocity.experiments.studies import run_bandwidth_sweep, run_rate_study
from spde_velocity.kernel import default_kernel, fisher_sigma
from spde_velocity.weights import DegenerateDesignError, WeightConfig, compute_weights, eval_V

ROOT = Path(__file__).resolve().parents[1]
LITERAL_RULE = "power_0.4"  # h = 0.5 delta^(2/5)
OPTIMAL_RULE = "delta_power"  # h = 0.5 delta^(1/5)


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def rate_result():
    cfg = load_config(ROOT / "configs/rate.toml").with_overrides(kind="integrated_risk", n_quad=100,
                                                                  box=[0.2, 0.8])
    return run_rate_study(cfg)


def _cells(res, rule, estimator):
    return sorted(res.table(rule, estimator), key=lambda c: -c.delta)


def test_rate_reproduction(rate_result, verdict):
    fit = rate_result.slope(LITERAL_RULE, "known")
    rmse = [f"{c.summary.rmse:.3g}" for c in _cells(rate_result, LITERAL_RULE, "known")]
    ok = rate_result.valid and 0.28 <= fit.slope <= 0.52
    verdict("rate, h=0.5*delta^0.4", ok, f"slope {fit.slope:.3f} +- {fit.stderr:.3f}, RMSE {rmse}")
    other = rate_result.slope(OPTIMAL_RULE, "known")
    verdict("rate, h=0.5*delta^0.2 (reference)", True, f"slope {other.slope:.3f} +- {other.stderr:.3f}")
    assert ok


def test_plug_in_diffusivity(rate_result, verdict):
    fit = rate_result.slope(LITERAL_RULE, "plug_in")
    finest = _cells(rate_result, LITERAL_RULE, "plug_in")[-1]
    a_true = 1.0
    rel = abs(finest.a_hat_mean - a_true) / a_true
    ok = 0.28 <= fit.slope <= 0.52 and rel <= 0.05
    verdict("plug-in diffusivity", ok, f"slope {fit.slope:.3f} +- {fit.stderr:.3f}, "
                                       f"mean a_hat at delta={finest.delta:g}: {finest.a_hat_mean:.4f} "
                                       f"(rel. error {rel:.3%})")
    assert ok


def test_integrated_risk(rate_result, verdict):
    risk = rate_result.risk[OPTIMAL_RULE]
    m = risk.mean_interior()
    fit = risk.slope()
    decreasing = bool(np.all(np.diff(m) < 0))
    ok = decreasing and fit is not None and 0.55 <= fit.slope <= 1.05
    verdict("integrated risk on [0.2, 0.8]", ok,
            f"slope {fit.slope:.3f} +- {fit.stderr:.3f}, interior means {np.round(m, 4).tolist()}")
    assert ok


def test_variance_scaling(rate_result, verdict):
    qv = np.array([c.qv_scaled for c in _cells(rate_result, OPTIMAL_RULE, "known")])
    ratio = qv.max() / qv.min()
    ok = bool(np.all(np.isfinite(qv))) and ratio <= 2.0
    verdict("[M]_T * N h constant within x2", ok, f"values {np.round(qv, 4).tolist()}, max/min {ratio:.2f}")
    assert ok


def test_bandwidth_u_shape(verdict):
    res = run_bandwidth_sweep(load_config(ROOT / "configs/sweep.toml"))
    ok = res.valid and res.left_ratio >= 1.2 and res.right_ratio >= 1.2
    verdict("bias-variance U-shape", ok,
            f"RMSE {np.round(res.rmse, 4).tolist()} over h x{res.h[-1] / res.h[0]:.0f}; "
            f"end/min ratios {res.left_ratio:.2f}, {res.right_ratio:.2f}")
    assert ok


def test_fisher_limit(verdict):
    k = default_kernel(1)
    sigma = fisher_sigma(k, 1.0, 1.0)[0, 0]
    parseval = 0.5 * k.l2_norm() ** 2
    cfg = StudyConfig.from_dict({
        "kind": "rate_in_delta", "deltas": [0.01], "R": 200, "guard_ratio": 16.0,
        "model": {"a": 1.0, "T": 1.0, "theta": {"family": "constant", "value": 0.0}},
        "time": {"implicitness": 0.5, "n_t": 10000}})
    cell = simulate_cell(cfg, 0)
    fisher = np.array([s.fisher[:, 0, 0] for s in cell.stats])
    mean = fisher.mean()
    se = fisher.mean(axis=1).std(ddof=1) / np.sqrt(len(fisher))
    rel = abs(mean / sigma - 1)
    rel_p = abs(sigma / parseval - 1)
    ok = rel <= 0.10 and rel_p <= 1e-6
    verdict("Fisher limit", ok, f"MC mean {mean:.4f} +- {se:.4f} over {cell.N} locations vs Sigma {sigma:.4f} "
                                f"(rel. {rel:.2%}); Parseval rel. {rel_p:.1e}")
    assert ok


def test_weights_exactness(verdict):
    rng = np.random.default_rng(20240607)
    worst_sum = worst_mom = 0.0
    n = 0
    while n < 1000:
        d = 1 if n < 800 else 2
        N = int(rng.integers(10, 200))
        locs = rng.uniform(0, 1, (N, d))
        x = rng.uniform(0, 1, d)
        try:
            ws = compute_weights(x, locs, WeightConfig(float(rng.uniform(0.1, 0.6)), "epanechnikov"))
        except DegenerateDesignError:
            continue
        worst_sum = max(worst_sum, abs(ws.w.sum() - 1))
        worst_mom = max(worst_mom, float(np.max(np.abs((locs - x).T @ ws.w))))
        n += 1
    nw_err = 0.0
    for N, x, h in ((40, 0.5, 0.3), (41, 0.5, 0.2), (64, 0.5078125, 0.25)):
        locs = (np.arange(N) + 0.5) / N
        v = eval_V("rectangular", (locs - x) / h)
        ws = compute_weights([x], locs, WeightConfig(h, "rectangular"))
        nw_err = max(nw_err, float(np.max(np.abs(ws.w - v / v.sum()))))
    ok = worst_sum < 1e-10 and worst_mom < 1e-10 and nw_err < 1e-12
    verdict("weights exactness", ok, f"max |sum w - 1| {worst_sum:.1e}, max |sum (x_k - x) w| {worst_mom:.1e} "
                                     f"over {n} designs; NW max diff {nw_err:.1e}")
    assert ok


def test_error_decomposition(verdict):
    cfg = load_config(ROOT / "configs/rate.toml").with_overrides(R=20, deltas=[2.0**-5])
    cell = simulate_cell(cfg, 0, decomposition_point=[0.5])
    h = cfg.h_rules[0].bandwidth(cell.delta, cell.N, 1)
    ws = compute_weights([0.5], cell.locations, WeightConfig(h, cfg.V))
    theta_x = cfg.model_spec.theta.value(np.array([[0.5]]))[0]
    worst = 0.0
    for s in cell.stats:
        direct = weighted_augmented_mle(s, ws, cfg.a).theta_hat
        dec = error_decomposition(s, ws, theta_x, cfg.base_kernel.l2_norm())
        worst = max(worst, float(np.max(np.abs(dec.reconstructed - direct) / np.abs(direct))))
    ok = worst <= 1e-3
    verdict("error decomposition", ok, f"max relative error {worst:.1e} over {len(cell.stats)} replicates")
    assert ok


def test_property_suites(verdict):
    suites = ["tests/test_kernel.py", "tests/test_spde_sim.py", "tests/test_measurements.py",
              "tests/test_weights.py", "tests/test_estimator.py"]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *suites],
                          cwd=ROOT, capture_output=True, text=True)
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0
    verdict("property suites", ok, last)
    assert ok
