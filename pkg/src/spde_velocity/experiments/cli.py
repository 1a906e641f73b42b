"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 study invalidated (a cell
with more than 10% failed replicates, or failed weight validation).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..measurements import MeasurementError
from ..spde_sim import ModelError
from ..weights import DegenerateDesignError, WeightConfig, WeightError, compute_weights, validate_weights
from . import report
from .config import ConfigError, load_config
from .studies import run_bandwidth_sweep, run_integrated_risk, run_rate_study, run_trajectory

EXIT_OK, EXIT_CONFIG, EXIT_INVALID = 0, 2, 3

KINDS = {"rate": "rate_in_delta", "sweep": "bandwidth_sweep", "trajectory": "trajectory",
         "risk": "integrated_risk", "validate-weights": "weights"}

log = logging.getLogger("spde_velocity")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spde-velocity",
                                     description="Monte Carlo studies for local velocity estimation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in KINDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML or JSON study file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for replicates")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--dump-paths", action="store_true",
                       help="write the first replicate's full path per delta as a binary dump")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load(args):
    cfg = load_config(args.config)
    changes = {"kind": KINDS[args.command]}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        changes["master_seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    return cfg.with_overrides(**changes) if changes["kind"] != cfg.kind or len(changes) > 1 else cfg


def _validate_weights(cfg, out: Path) -> int:
    locs = cfg.locations(cfg.deltas[0])
    hs = cfg.h_grid or [r.bandwidth(cfg.deltas[0], len(locs), cfg.dim) for r in cfg.h_rules]
    rows, report_rows, ok = [], [], True
    for h in hs:
        for x in cfg.eval_points:
            try:
                ws = compute_weights(x, locs, WeightConfig(h, cfg.V))
            except DegenerateDesignError as exc:
                log.error("%s", exc)
                ok = False
                continue
            rep = validate_weights(ws, locs)
            ok &= rep.passed
            rows.extend([[x, k, w, w != 0] for k, w in enumerate(ws.w)])
            report_rows.append([x, h, rep.max_scaled, rep.abs_sum, rep.sum_residual, rep.moment_residual,
                                rep.support_violations, ws.min_eig, ws.n_active, rep.passed])
    report.write_weights(rows, report_rows, out)
    return EXIT_OK if ok else EXIT_INVALID


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = _load(args)
    except (ConfigError, ModelError, MeasurementError, WeightError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump = out / "paths" if args.dump_paths else None
    if args.command == "validate-weights":
        return _validate_weights(cfg, out)
    try:
        if args.command in ("rate", "risk") and cfg.kind == "rate_in_delta":
            res = run_rate_study(cfg, workers=args.workers, dump_dir=dump)
            report.write_rate(res, out)
            valid = res.valid
            for (rule, est, p, comp), fit in res.slopes.items():
                if fit is not None:
                    print(f"{rule} {est} point {p} component {comp}: slope {fit.slope:.3f} "
                          f"(stderr {fit.stderr:.3f})")
        elif args.command == "risk":
            res = run_integrated_risk(cfg, workers=args.workers, dump_dir=dump)
            report.write_risk(res, out)
            valid = bool(np.all(np.isfinite(res.interior).mean(axis=1) >= 0.9))
            fit = res.slope()
            if fit is not None:
                print(f"interior risk slope {fit.slope:.3f} (stderr {fit.stderr:.3f})")
        elif args.command == "sweep":
            res = run_bandwidth_sweep(cfg, workers=args.workers, dump_dir=dump)
            report.write_sweep(res, out)
            valid = res.valid
            h_min = res.h[res.argmin] if res.argmin >= 0 else float("nan")
            print(f"minimum RMSE at h={h_min:.4g}; end ratios {res.left_ratio:.2f}, "
                  f"{res.right_ratio:.2f}; U-shape: {res.u_shape()}")
        else:
            res = run_trajectory(cfg, workers=args.workers, dump_dir=dump)
            report.write_trajectory(res, out)
            valid = all(np.isfinite(e).all(axis=(1, 2)).mean() >= 0.9 for e in res.estimates.values())
            for d in res.estimates:
                print(f"delta={d:g}: median sup error {res.median_sup_error(d):.4g}")
    except (ConfigError, ModelError, MeasurementError, WeightError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not valid:
        print("study invalidated: a cell exceeded the 10% failure limit", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
