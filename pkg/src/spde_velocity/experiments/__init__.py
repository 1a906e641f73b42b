"""Monte Carlo studies: configuration, replicate scheduling, analysis and reporting."""

from .config import ConfigError, HRule, StudyConfig, load_config, replicate_seed
from .engine import simulate_cell, simulate_cells
from .studies import (fit_loglog_slope, run_bandwidth_sweep, run_integrated_risk, run_rate_study, run_trajectory,
                      summarize_errors)

__all__ = ["ConfigError", "HRule", "StudyConfig", "load_config", "replicate_seed", "simulate_cell",
           "simulate_cells", "fit_loglog_slope", "run_bandwidth_sweep", "run_integrated_risk", "run_rate_study",
           "run_trajectory", "summarize_errors"]
