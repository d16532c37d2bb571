"""Two-field reaction-diffusion fire model used as the forecast dynamics.

Temperature ``w`` (K) and fuel fraction ``z`` evolve by

    dw/dt = k_diff * lap(w) - wind . grad(w) - gamma * (w - w_ambient) + A * z * f(w)
    dz/dt = -C_fuel * z * f(w),     f(w) = exp(-B / (w - w_ambient)) for w > w_ambient

discretized with explicit Euler, centered diffusion and first-order upwind
advection. Outside the grid the temperature is ambient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import GridGeometry, ScalarField


class ModelInstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelState:
    w: ScalarField
    z: ScalarField

    def __post_init__(self):
        if self.w.geometry != self.z.geometry:
            raise ValueError("temperature and fuel must share one grid")

    @property
    def geometry(self) -> GridGeometry:
        return self.w.geometry


@dataclass(frozen=True)
class FireModelParams:
    k_diff: float = 0.07476
    wind: tuple = (0.01, 0.0)
    w_ambient: float = 300.0
    w_ignition: float = 1000.0
    A: float = 65.7755
    B: float = 558.49
    C_fuel: float = 0.056875
    gamma: float = 0.003182
    dt: float = 1.0
    cycle_len: float = 180.0

    def __post_init__(self):
        if min(self.k_diff, self.A, self.B, self.C_fuel, self.gamma) < 0:
            raise ValueError("model rates must be non-negative")
        if not self.dt > 0 or not self.cycle_len >= 0:
            raise ValueError("dt must be positive and cycle_len non-negative")
        object.__setattr__(self, "wind", tuple(float(c) for c in self.wind))

    def check_stability(self, geometry: GridGeometry) -> None:
        h = min(geometry.hx, geometry.hy)
        if self.k_diff > 0 and self.dt > h * h / (4.0 * self.k_diff):
            raise ValueError(f"dt={self.dt} violates the diffusion bound {h * h / (4 * self.k_diff):.4g}")
        speed = math.hypot(*self.wind)
        if speed > 0 and self.dt > h / speed:
            raise ValueError(f"dt={self.dt} violates the advection bound {h / speed:.4g}")

    @property
    def steps_per_cycle(self) -> int:
        return math.ceil(self.cycle_len / self.dt - 1e-9)


def _padded(w: np.ndarray, fill: float) -> np.ndarray:
    p = np.empty((w.shape[0] + 2, w.shape[1] + 2))
    p[...] = fill
    p[1:-1, 1:-1] = w
    return p


def _step_arrays(w, z, params: FireModelParams, hx, hy, step_index=0):
    wa = params.w_ambient
    P = _padded(w, wa)
    c = P[1:-1, 1:-1]
    lap = (P[1:-1, 2:] + P[1:-1, :-2] - 2.0 * c) / (hx * hx) + (P[2:, 1:-1] + P[:-2, 1:-1] - 2.0 * c) / (hy * hy)
    ux, uy = params.wind
    adv = 0.0
    if ux != 0.0:
        dwx = (c - P[1:-1, :-2]) / hx if ux > 0 else (P[1:-1, 2:] - c) / hx
        adv = adv + ux * dwx
    if uy != 0.0:
        dwy = (c - P[:-2, 1:-1]) / hy if uy > 0 else (P[2:, 1:-1] - c) / hy
        adv = adv + uy * dwy
    excess = w - wa
    hot = excess > 0.0
    rate = np.zeros_like(w)
    rate[hot] = np.exp(-params.B / excess[hot]) * z[hot]
    dt = params.dt
    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        w_new = w + dt * (params.k_diff * lap - adv - params.gamma * excess + params.A * rate)
    burn = np.minimum(dt * params.C_fuel * rate, z)
    z_new = z - burn
    # fuel is frozen on the domain boundary
    z_new[0, :], z_new[-1, :], z_new[:, 0], z_new[:, -1] = z[0, :], z[-1, :], z[:, 0], z[:, -1]
    if not (np.all(np.isfinite(w_new)) and np.all(np.isfinite(z_new))):
        raise ModelInstabilityError(f"non-finite state after step {step_index}")
    return w_new, z_new


def step(U: ModelState, params: FireModelParams, step_index: int = 0) -> ModelState:
    g = U.geometry
    w, z = _step_arrays(U.w.values, U.z.values, params, g.hx, g.hy, step_index)
    return ModelState(U.w.with_values(w), U.z.with_values(z))


def run_cycle(U: ModelState, params: FireModelParams) -> ModelState:
    """Advance ``U`` by ``ceil(cycle_len / dt)`` steps."""
    g = U.geometry
    w = np.array(U.w.values)
    z = np.array(U.z.values)
    for i in range(params.steps_per_cycle):
        w, z = _step_arrays(w, z, params, g.hx, g.hy, i)
    return ModelState(U.w.with_values(w), U.z.with_values(z))


def ignite(geometry: GridGeometry, params: FireModelParams, size: float = 10.0,
           center=None) -> ModelState:
    """Ambient state with full fuel and a hot square of side ``size`` meters."""
    if center is None:
        center = (geometry.x0 + geometry.Lx / 2, geometry.y0 + geometry.Ly / 2)
    X, Y = geometry.mesh()
    hot = (np.abs(X - center[0]) <= size / 2) & (np.abs(Y - center[1]) <= size / 2)
    w = np.where(hot, params.w_ignition, params.w_ambient)
    return ModelState(ScalarField(geometry, w, params.w_ambient),
                      ScalarField(geometry, np.ones(geometry.shape), 1.0))


def spin_up(geometry: GridGeometry, params: FireModelParams, cycles: int = 1,
            size: float = 10.0) -> ModelState:
    U = ignite(geometry, params, size)
    for _ in range(cycles):
        U = run_cycle(U, params)
    return U
