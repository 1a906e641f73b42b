"""Replicate scheduling: simulate every replicate of a ``delta`` cell and keep
only the per-location sufficient statistics."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..kernel import BaseKernel
from ..measurements import (LocalStatistics, MeasurementConfig, StatisticsObserver, adjoint_operator,
                            measurement_operator, remainder_operator)
from ..spde_sim import Grid, ModelSpec, PathRecorder, PathWriter, SimulationError, Stepper, run_batch
from .config import StudyConfig, replicate_seed

log = logging.getLogger(__name__)


@dataclass
class Cell:
    """All replicates at one resolution ``delta``."""

    delta_index: int
    delta: float
    locations: np.ndarray
    grid: Grid
    seeds: list
    stats: list  # LocalStatistics or None for failed replicates
    errors: dict = field(default_factory=dict)
    elapsed: float = 0.0
    field_frames: np.ndarray | None = None
    field_times: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.locations)

    @property
    def n_failed(self) -> int:
        return sum(s is None for s in self.stats)


@dataclass(frozen=True)
class _Task:
    model: dict
    grid: Grid
    delta: float
    locations: np.ndarray
    kernel: dict
    guard_ratio: float
    derivatives: str
    seeds: tuple
    decomposition_point: tuple | None
    record_every: int
    dump_path: str | None


def _run_task(task: _Task):
    model = ModelSpec.from_dict(task.model)
    config = MeasurementConfig(task.delta, task.locations, BaseKernel.from_dict(task.kernel),
                               task.guard_ratio, task.derivatives)
    grid = task.grid
    Phi = measurement_operator(config, grid)
    cross = None
    if task.decomposition_point is not None:
        cross = {"adjoint": adjoint_operator(config, grid, model),
                 "remainder": remainder_operator(config, grid, model, task.decomposition_point)}
    stepper = Stepper(model, grid)

    def batch(seeds, extra_observers=()):
        ob = StatisticsObserver(config, grid, cross, operator=Phi)
        run_batch(model, grid, list(seeds), [ob, *extra_observers], stepper=stepper)
        return ob.all_statistics()

    extra = []
    recorder = None
    if task.record_every:
        recorder = PathRecorder(columns=[0], every=task.record_every)
        extra.append(recorder)
    if task.dump_path:
        extra.append(PathWriter(task.dump_path, task.seeds[0]))
    errors = {}
    try:
        stats = batch(task.seeds, extra)
    except (SimulationError, FloatingPointError) as exc:
        log.warning("batch failed (%s); isolating replicates", exc)
        stats = []
        for i, s in enumerate(task.seeds):
            try:
                stats.extend(batch([s]))
            except (SimulationError, FloatingPointError) as single:
                stats.append(None)
                errors[i] = str(single)
    frames = None
    if recorder is not None and recorder.frames:
        frames = (recorder.values()[0], np.asarray(recorder.steps) * grid.dt)
    return stats, errors, frames


def simulate_cell(cfg: StudyConfig, delta_index: int, *, workers: int = 1,
                  decomposition_point=None, record_field: bool = False,
                  dump_dir: str | Path | None = None) -> Cell:
    """Simulate ``cfg.R`` replicates at ``cfg.deltas[delta_index]``.

    Replicates are split into batches of ``cfg.batch_size``; a replicate's
    result depends only on its own seed, so batching and worker count do not
    change any number.
    """
    delta = cfg.deltas[delta_index]
    grid = cfg.grid(delta)
    locs = cfg.locations(delta)
    seeds = [replicate_seed(cfg.master_seed, delta_index, r) for r in range(cfg.R)]
    size = max(1, int(cfg.batch_size))
    chunks = [tuple(seeds[i:i + size]) for i in range(0, len(seeds), size)]
    every = max(1, grid.n_t // 400) if record_field else 0
    dump = None
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        dump = str(Path(dump_dir) / f"path_delta{delta_index}_rep0.bin")
    tasks = [
        _Task(cfg.model, grid, delta, locs, cfg.base_kernel.to_dict(), cfg.guard_ratio, cfg.derivatives,
              chunk, None if decomposition_point is None else tuple(np.atleast_1d(decomposition_point)),
              every if i == 0 else 0, dump if i == 0 else None)
        for i, chunk in enumerate(chunks)
    ]
    log.info("delta=%g: N=%d M=%d n_t=%d R=%d", delta, len(locs), grid.M, grid.n_t, cfg.R)
    t0 = time.perf_counter()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    stats, errors, frames = [], {}, None
    for i, (st, err, fr) in enumerate(results):
        offset = i * size
        stats.extend(st)
        errors.update({offset + k: v for k, v in err.items()})
        if fr is not None:
            frames = fr
    cell = Cell(delta_index, delta, locs, grid, seeds, stats, errors, time.perf_counter() - t0)
    if frames is not None:
        cell.field_frames, cell.field_times = frames
    log.info("delta=%g done in %.1f s (%d failed)", delta, cell.elapsed, cell.n_failed)
    return cell


def simulate_cells(cfg: StudyConfig, *, workers: int = 1, record_field: bool = False,
                   dump_dir=None, decomposition_point=None) -> list[Cell]:
    return [simulate_cell(cfg, i, workers=workers, record_field=record_field and i == 0,
                          dump_dir=dump_dir, decomposition_point=decomposition_point)
            for i in range(len(cfg.deltas))]


def stack_statistics(stats: list[LocalStatistics]) -> dict:
    """Replicate-stacked arrays (failed replicates dropped) for vectorised estimation."""
    ok = [s for s in stats if s is not None]
    return {name: np.stack([getattr(s, name) for s in ok]) for name in
            ("fisher", "ito_grad", "lap_grad", "ito_lap", "lap_sq")}
