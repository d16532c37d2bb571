"""Twin experiment driver: spin-up, ensemble generation, cycling, exports."""

from __future__ import annotations

import logging
import os
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import io
from .config import RunConfig
from .diagnostics import (
    fireline_band,
    kde,
    max_variance_pixel,
    pvalue_map,
    write_density_csv,
)
from .field import ScalarField, Warp, is_invertible, pixel_displacement
from .firemodel import ModelState, run_cycle, spin_up
from .morphing_enkf import (
    RegistrationRepState,
    ReferenceState,
    from_registration_rep,
    morphing_analysis,
    write_checkpoint,
)
from .randomfields import SmoothFieldSpec, sample_field, sample_invertible_warp

log = logging.getLogger(__name__)


class Timer:
    def __init__(self):
        self.totals = defaultdict(float)

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0

    def format(self) -> str:
        return "".join(f"{k} {v:.3f}\n" for k, v in sorted(self.totals.items()))


def truth_warp(cfg: RunConfig) -> Warp:
    g = cfg.grid.geometry()
    T = Warp.zero(cfg.reg.M, g)
    s = np.linspace(0.0, 1.0, T.m)
    bump = np.outer(np.sin(np.pi * s), np.sin(np.pi * s))
    return Warp(T.level, cfg.data.shift_x * bump, cfg.data.shift_y * bump, g)


def member_seeds(seed: int, n: int) -> np.ndarray:
    """Independent integer seeds for ``n`` draws, derived from ``seed``."""
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32).astype(np.int64)


def initial_ensemble(cfg: RunConfig, ref: ReferenceState) -> list[ModelState]:
    """Members ``(w0 + r_k) o (I + T_k)`` with smooth random ``r_k`` and ``T_k``."""
    g = ref.geometry
    e = cfg.ens
    seeds = member_seeds(cfg.run.seed, 3 * e.members + 1)
    zero = ScalarField(g, np.zeros(g.shape), 0.0)
    members = []
    for k in range(e.members):
        r = sample_field(SmoothFieldSpec(e.amp_r, int(seeds[3 * k]), e.modes), g)
        T = sample_invertible_warp(SmoothFieldSpec(e.amp_T, int(seeds[3 * k + 1]), e.modes),
                                   SmoothFieldSpec(e.amp_T, int(seeds[3 * k + 2]), e.modes),
                                   cfg.reg.M, g, e.max_tries)
        members.append(from_registration_rep(RegistrationRepState(r, zero, T), ref))
    return members


@dataclass
class CycleRecord:
    cycle: int
    forecast_distance: float
    analysis_distance: float
    increment_scales: list
    node_visits: int
    invertible: bool
    forecast_w: np.ndarray = field(repr=False)
    forecast_r_w: np.ndarray = field(repr=False)
    forecast_tx: np.ndarray = field(repr=False)
    analysis_w: np.ndarray = field(repr=False)
    analysis_r_w: np.ndarray = field(repr=False)
    analysis_tx: np.ndarray = field(repr=False)

    def format(self) -> str:
        scaled = sum(1 for s in self.increment_scales if s != 1.0)
        return (f"cycle={self.cycle} forecast_distance={self.forecast_distance:.10g} "
                f"analysis_distance={self.analysis_distance:.10g} scaled_increments={scaled} "
                f"node_visits={self.node_visits} invertible={self.invertible}")


@dataclass
class RunResult:
    cycles: list
    timer: Timer
    out: str


def _write_members(directory, members):
    io.ensure_dir(directory)
    for k, U in enumerate(members):
        io.write_field(os.path.join(directory, f"w_{k:03d}.mkf"), U.w)
        io.write_field(os.path.join(directory, f"z_{k:03d}.mkf"), U.z)


def _diagnostics(directory, cfg: RunConfig, rec: CycleRecord):
    """P-value maps of both ensembles and densities at the probe pixel."""
    g = cfg.grid.geometry()
    io.ensure_dir(directory)
    row, col = cfg.run.probe_row, cfg.run.probe_col
    if row < 0 or col < 0:
        row, col = max_variance_pixel(rec.forecast_w)
    lines = [f"probe row={row} col={col}"]
    for stage in ("forecast", "analysis"):
        ens = {name: getattr(rec, f"{stage}_{name}") for name in ("w", "r_w", "tx")}
        band = fireline_band(ens["w"].mean(axis=0), cfg.run.fireline_contour)
        p = {}
        for name, samples in ens.items():
            pmap, _ = pvalue_map(samples, g)
            p[name] = pmap.values
            io.write_field(os.path.join(directory, f"pvalue_{stage}_{name}.mkf"), pmap)
            io.write_csv(os.path.join(directory, f"pvalue_{stage}_{name}.csv"), pmap)
            x = samples[:, row, col]
            if np.std(x) > 0:
                d = kde(x, cfg.run.bandwidth_factor)
                write_density_csv(os.path.join(directory, f"kde_{stage}_{name}.csv"), d)
                lines.append(f"{stage} kde {name} bandwidth={d.bandwidth:.10g}")
            else:
                lines.append(f"{stage} kde {name} skipped: zero spread")
        n = int(band.sum())
        frac = float(np.mean(p["r_w"][band] > p["w"][band])) if n else float("nan")
        lines.append(f"{stage} fireline_pixels={n} fraction_r_w_more_gaussian={frac:.6f}")
    with open(os.path.join(directory, "diagnostics.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run_experiment(cfg: RunConfig, out: str | None = None, write: bool = True) -> RunResult:
    """Run the twin experiment; every cycle lands in ``out/cycle_XX``."""
    cfg = cfg.validate()
    out = out or cfg.run.out
    g = cfg.grid.geometry()
    params = cfg.model.params()
    enkf_cfg = cfg.enkf_config()
    timer = Timer()
    if write:
        io.ensure_dir(out)
        with open(os.path.join(out, "config.txt"), "w") as fh:
            fh.write(cfg.to_text())

    with timer.phase("model"):
        U0 = spin_up(g, params, cfg.model.spinup_cycles, cfg.model.ignition_size)
    ref = ReferenceState(U0)
    with timer.phase("init"):
        members = initial_ensemble(cfg, ref)
        zero = ScalarField(g, np.zeros(g.shape), 0.0)
        truth = from_registration_rep(RegistrationRepState(zero, zero, truth_warp(cfg)), ref)
    if write:
        d0 = os.path.join(out, "cycle_00")
        _write_members(d0, members)
        io.write_field(os.path.join(d0, "data_w.mkf"), truth.w)

    records = []
    warps = [None] * len(members)
    data_warp = None
    cycle_seeds = member_seeds(cfg.run.seed + 1, max(cfg.run.cycles, 1))
    report_lines = []
    for cycle in range(1, cfg.run.cycles + 1):
        last_good = members
        try:
            with timer.phase("model"):
                members = [run_cycle(U, params) for U in members]
                U0 = run_cycle(U0, params)
                truth = run_cycle(truth, params)
            ref = ReferenceState(U0)
            with timer.phase("analysis"):
                res = morphing_analysis(members, ref, truth.w, enkf_cfg, int(cycle_seeds[cycle - 1]),
                                        warps, data_warp)
        except Exception:
            if write:
                _write_members(os.path.join(out, "last_good"), last_good)
            raise
        warps = [rep.T for rep in res.analysis_reps]
        data_warp = res.data_rep.T
        rec = CycleRecord(
            cycle, res.forecast_distance, res.analysis_distance, res.increment_scales,
            sum(r.node_visits for r in res.reports) + res.data_report.node_visits,
            all(is_invertible(T) for T in warps),
            np.stack([U.w.values for U in members]),
            np.stack([r.r_w.values for r in res.forecast_reps]),
            np.stack([pixel_displacement(r.T)[0] for r in res.forecast_reps]),
            np.stack([U.w.values for U in res.members]),
            np.stack([r.r_w.values for r in res.analysis_reps]),
            np.stack([pixel_displacement(r.T)[0] for r in res.analysis_reps]),
        )
        records.append(rec)
        forecast, members = members, res.members
        report_lines.append(rec.format())
        log.info(rec.format())
        if write:
            with timer.phase("export"):
                d = os.path.join(out, f"cycle_{cycle:02d}")
                write_checkpoint(os.path.join(d, "analysis"), res.members, res.analysis_reps)
                write_checkpoint(os.path.join(d, "forecast"), forecast, res.forecast_reps)
                io.write_field(os.path.join(d, "data_w.mkf"), truth.w)
                io.write_field(os.path.join(d, "data_r_w.mkf"), res.data_rep.r_w)
                io.write_warp(os.path.join(d, "data_T.mkw"), res.data_rep.T)
                with open(os.path.join(d, "registration.txt"), "w") as fh:
                    for k, r in enumerate(res.reports):
                        fh.write(f"# member {k}\n{r.format()}\n")
                    fh.write(f"# data\n{res.data_report.format()}\n")
                _diagnostics(d, cfg, rec)
    if write:
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write("\n".join(report_lines) + ("\n" if report_lines else ""))
        with open(os.path.join(out, "timing.txt"), "w") as fh:
            fh.write(timer.format())
    return RunResult(records, timer, out)

