"""Automatic coarse-to-fine registration of two gridded fields.

``register(u, v)`` looks for a warp ``T`` with ``v ~ u o (I+T)`` by
minimizing

    J(T) = int |v - u o (I+T)| + C1 int |Tx| + |Ty| + C2 int |grad T|

on a hierarchy of morphing grids, moving one node at a time. Each node move
is restricted so that every mapped quadrant stays strictly convex, which keeps
``I+T`` invertible throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .field import (
    GridGeometry,
    ScalarField,
    Warp,
    interp_warp,
    is_invertible,
    to_level,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    """Tuning of the registration.

    Lengths in the objective are measured on the unit square when
    ``normalize_coords`` is set (the default); otherwise in meters.
    """

    M: int = 4
    C1: float = 10000.0
    C2: float = 1000.0
    max_sweeps: int = 5
    rel_improvement_tol: float = 1e-3
    residual_inf_tol: float = 1.0
    search_points_per_segment: int = 2
    coord_descent_iters: int = 3
    gss_max_iter: int = 20
    gss_tol_pixels: float = 0.01
    convexity_margin: float = 1e-3
    normalize_coords: bool = True

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.C1 < 0 or self.C2 < 0:
            raise ValueError("C1 and C2 must be non-negative")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not (self.rel_improvement_tol > 0 and self.residual_inf_tol > 0 and self.gss_tol_pixels > 0):
            raise ValueError("tolerances must be positive")
        if self.search_points_per_segment < 1 or self.coord_descent_iters < 0 or self.gss_max_iter < 2:
            raise ValueError("invalid search settings")
        if not 0 <= self.convexity_margin < 0.5:
            raise ValueError("convexity_margin must be in [0, 0.5)")


@dataclass(frozen=True)
class ObjectiveBreakdown:
    residual_norm: float
    warp_norm: float
    grad_norm: float
    total: float


@dataclass
class SweepRecord:
    level: int
    sweep: int
    J: float
    r_norm: float
    stop: str

    def format(self) -> str:
        return f"level={self.level} sweep={self.sweep} J={self.J:.10g} r_norm={self.r_norm:.6g} stop={self.stop}"


@dataclass
class RegistrationReport:
    sweeps: list = field(default_factory=list)
    node_visits: int = 0
    node_moves: int = 0
    init_fallbacks: list = field(default_factory=list)

    def format(self) -> str:
        return "\n".join(s.format() for s in self.sweeps)

    @property
    def final_residual_inf(self) -> float:
        return self.sweeps[-1].r_norm if self.sweeps else float("nan")


# ---------------------------------------------------------------------------
# Smoothing


def _smoothing_matrix(n: int, level: int) -> np.ndarray:
    """Row ``j`` holds the kernel weights over the tripled index range.

    Coordinates are normalized to ``[0, 1]`` across the domain; rows are scaled
    so that their squared weights sum to one.
    """
    alpha = 0.25 / (2 ** level + 1)
    xo = np.arange(n) / (n - 1)
    xe = np.arange(-n + 1, 2 * n + 1) / (n - 1)
    E = np.exp(-((xo[:, None] - xe[None, :]) ** 2) / alpha)
    return E / np.sqrt(np.sum(E * E, axis=1))[:, None]


def smooth(u: ScalarField, level: int) -> ScalarField:
    """Gaussian smoothing on the scale of morphing level ``level``.

    Values outside the domain are the boundary value. The weights are not
    normalized to unit sum, so a constant field is scaled, not preserved; the
    smoothed field's boundary value is the image of the constant extension at
    the domain corner.
    """
    if level < 1:
        raise ValueError("level must be >= 1")
    g = u.geometry
    Phi = _smoothing_matrix(g.nx, level)
    Psi = _smoothing_matrix(g.ny, level)
    bv = u.boundary_value
    inner_x = Phi[:, g.nx - 1: 2 * g.nx - 1]
    inner_y = Psi[:, g.ny - 1: 2 * g.ny - 1]
    sx = Phi.sum(axis=1)
    sy = Psi.sum(axis=1)
    vals = inner_y @ (u.values - bv) @ inner_x.T + bv * np.outer(sy, sx)
    return ScalarField(g, vals, bv * sx[0] * sy[0])


# ---------------------------------------------------------------------------
# Pixel/morphing-grid bookkeeping


class _LevelGrid:
    """Pixel-to-cell tables for one morphing level (pixel-index units)."""

    def __init__(self, geometry: GridGeometry, level: int, cfg: RegistrationConfig):
        g = geometry
        n = 2 ** level
        self.geometry = g
        self.level = level
        self.m = n + 1
        self.Hx = (g.nx - 1) / n
        self.Hy = (g.ny - 1) / n
        self.gx = np.arange(self.m) * self.Hx
        self.gy = np.arange(self.m) * self.Hy
        self.sx, self.cs, self.ce = self._axis(g.nx, n)
        self.sy, self.rs, self.re = self._axis(g.ny, n)
        if cfg.normalize_coords:
            ux, uy = 1.0 / (g.nx - 1), 1.0 / (g.ny - 1)
        else:
            ux, uy = g.hx, g.hy
        self.ux, self.uy = ux, uy
        w_res = ux * uy
        w_cell = (self.Hx * ux) * (self.Hy * uy)
        self.weights = np.array([w_res, w_cell, w_cell, cfg.C1, cfg.C2, ux, uy,
                                 self.Hx, self.Hy, ux / uy, uy / ux])

    @staticmethod
    def _axis(npix: int, ncell: int):
        gp = np.arange(npix) * ncell / (npix - 1)
        cell = np.minimum(gp.astype(np.int64), ncell - 1)
        s = gp - cell
        start = np.searchsorted(cell, np.arange(ncell), side="left").astype(np.int64)
        end = np.searchsorted(cell, np.arange(ncell), side="right").astype(np.int64)
        return s, start, end

    def to_pixels(self, T: Warp):
        g = self.geometry
        return np.array(T.tx / g.hx), np.array(T.ty / g.hy)

    def to_warp(self, DX, DY) -> Warp:
        g = self.geometry
        return Warp(self.level, DX * g.hx, DY * g.hy, g)

    def residual_stats(self, DX, DY, u: ScalarField, v: ScalarField):
        return K.residual_stats(DX, DY, self.sx, self.sy, self.cs, self.ce, self.rs, self.re,
                                u.values, u.boundary_value, v.values)

    def breakdown(self, DX, DY, u_s: ScalarField, v_s: ScalarField) -> ObjectiveBreakdown:
        w = self.weights
        res_sum, _ = self.residual_stats(DX, DY, u_s, v_s)
        residual = w[0] * res_sum
        warp = w[1] * float(np.sum(self.ux * np.abs(DX) + self.uy * np.abs(DY)))
        grad = w[2] * K.grad_total(DX, DY, self.Hx, self.Hy, w[9], w[10])
        total = residual + w[3] * warp + w[4] * grad
        return ObjectiveBreakdown(residual, warp, grad, total)

    def optimize_node(self, k, j, DX, DY, u_s, v_s, cfg: RegistrationConfig, accept_eps: float):
        return K.optimize_node(k, j, DX, DY, self.gx, self.gy, self.sx, self.sy,
                               self.cs, self.ce, self.rs, self.re,
                               u_s.values, u_s.boundary_value, v_s.values, self.weights,
                               cfg.search_points_per_segment, cfg.coord_descent_iters,
                               cfg.gss_max_iter, cfg.gss_tol_pixels, cfg.convexity_margin,
                               accept_eps)


# ---------------------------------------------------------------------------
# Public operations


def objective(T: Warp, u_s: ScalarField, v_s: ScalarField,
              cfg: RegistrationConfig = RegistrationConfig()) -> ObjectiveBreakdown:
    """Level-``T.level`` objective of ``T`` for (typically smoothed) fields."""
    if u_s.geometry != v_s.geometry or T.geometry != u_s.geometry:
        raise ValueError("objective arguments must share one geometry")
    grid = _LevelGrid(u_s.geometry, T.level, cfg)
    DX, DY = grid.to_pixels(T)
    return grid.breakdown(DX, DY, u_s, v_s)


def optimize_node(T: Warp, j: int, k: int, u_s: ScalarField, v_s: ScalarField,
                  cfg: RegistrationConfig = RegistrationConfig()) -> Warp:
    """Return ``T`` with morphing node ``(j, k)`` (x index, y index) improved."""
    m = T.m
    if not (0 <= j < m and 0 <= k < m):
        raise IndexError(f"node ({j}, {k}) outside the {m}x{m} morphing grid")
    grid = _LevelGrid(u_s.geometry, T.level, cfg)
    DX, DY = grid.to_pixels(T)
    J = grid.breakdown(DX, DY, u_s, v_s).total
    moved, _, _ = grid.optimize_node(k, j, DX, DY, u_s, v_s, cfg, 1e-10 * J)
    return grid.to_warp(DX, DY) if moved else T


def _initial_level_warp(level, T_tilde, T_prev, T_prev_tilde, report):
    """Starting warp on ``level``: the initial guess plus the coarse correction."""
    base = to_level(T_tilde, level)
    if T_prev is None:
        candidates = [base]
    else:
        corr = interp_warp(T_prev - T_prev_tilde, level)
        candidates = [base + corr * s for s in (1.0, 0.5, 0.25, 0.125)]
        candidates.append(interp_warp(T_prev, level))
    candidates.append(base)
    for i, T in enumerate(candidates):
        if is_invertible(T):
            if i:
                report.init_fallbacks.append((level, i))
                log.info("level %d: initial warp fallback #%d", level, i)
            return T
    report.init_fallbacks.append((level, len(candidates)))
    log.warning("level %d: no invertible initial warp, starting from zero", level)
    return Warp.zero(level, base.geometry)


def register(u: ScalarField, v: ScalarField, T_init: Optional[Warp] = None,
             cfg: RegistrationConfig = RegistrationConfig(),
             on_update: Optional[Callable] = None) -> tuple[Warp, RegistrationReport]:
    """Find ``T`` on level ``cfg.M`` with ``v ~ u o (I+T)``.

    ``on_update(level, j, k, T, moved)`` is called after every node visit when
    given (``T`` is the current level warp); it is meant for diagnostics and
    slows the sweep down considerably.
    """
    if u.geometry != v.geometry:
        raise ValueError("u and v must share one geometry")
    g = u.geometry
    M = cfg.M
    if T_init is None:
        T_tilde = Warp.zero(M, g)
    else:
        if T_init.geometry != g:
            raise ValueError("initial warp lives on a different domain")
        T_tilde = to_level(T_init, M)
    report = RegistrationReport()
    T_prev = T_prev_tilde = None
    for level in range(1, M + 1):
        u_s = smooth(u, level)
        v_s = smooth(v, level)
        T_level = _initial_level_warp(level, T_tilde, T_prev, T_prev_tilde, report)
        grid = _LevelGrid(g, level, cfg)
        DX, DY = grid.to_pixels(T_level)
        m = grid.m
        J = grid.breakdown(DX, DY, u_s, v_s).total
        for sweep in range(1, cfg.max_sweeps + 1):
            J_before = J
            eps = 1e-10 * J_before
            for j in range(m):
                for k in range(m):
                    moved, _, _ = grid.optimize_node(k, j, DX, DY, u_s, v_s, cfg, eps)
                    report.node_visits += 1
                    report.node_moves += int(moved)
                    if on_update is not None:
                        on_update(level, j, k, grid.to_warp(DX, DY), moved)
            J = grid.breakdown(DX, DY, u_s, v_s).total
            _, r_inf = grid.residual_stats(DX, DY, u, v)
            if r_inf < cfg.residual_inf_tol:
                stop = "residual"
            elif J_before <= 0.0 or (J_before - J) / J_before < cfg.rel_improvement_tol:
                stop = "improvement"
            elif sweep == cfg.max_sweeps:
                stop = "max_sweeps"
            else:
                stop = "none"
            report.sweeps.append(SweepRecord(level, sweep, J, r_inf, stop))
            log.debug(report.sweeps[-1].format())
            if stop != "none":
                break
        T_prev = grid.to_warp(DX, DY)
        T_prev_tilde = to_level(T_tilde, level)
    return T_prev, report


def raw_residual(u: ScalarField, v: ScalarField, T: Warp,
                 cfg: RegistrationConfig = RegistrationConfig()) -> tuple[float, float]:
    """``(integral, sup)`` of ``|v - u o (I+T)|`` on the pixel grid (objective units)."""
    grid = _LevelGrid(u.geometry, T.level, cfg)
    DX, DY = grid.to_pixels(T)
    s, big = grid.residual_stats(DX, DY, u, v)
    return grid.weights[0] * s, big
