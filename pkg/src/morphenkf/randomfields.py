"""Smooth random fields from a decaying sine series.

    f(x, y) = amplitude * sum_{j,l=1..d} lam_jl * d_jl * sin(j pi x) sin(l pi y)

with ``lam_jl = (1 + sqrt(j^2 + l^2))^-2``, ``d_jl ~ N(0, 1)`` and ``x, y``
normalized to ``[0, 1]`` over the domain. Every sample vanishes on the domain
edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .field import GridGeometry, ScalarField, Warp, is_invertible, morph_grid_size

log = logging.getLogger(__name__)


class WarpSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SmoothFieldSpec:
    amplitude: float
    seed: int
    d: int = 10

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("need at least one mode per direction")
        if not self.amplitude >= 0:
            raise ValueError("amplitude must be non-negative")


def mode_weights(d: int) -> np.ndarray:
    j = np.arange(1, d + 1)
    return (1.0 + np.hypot(j[:, None], j[None, :])) ** -2


def _sines(s: np.ndarray, d: int) -> np.ndarray:
    S = np.sin(np.pi * np.outer(s, np.arange(1, d + 1)))
    # sin(j*pi) is not exactly zero in floating point
    S[(s == 0.0) | (s == 1.0)] = 0.0
    return S


def series(coeffs: np.ndarray, xs: np.ndarray, ys: np.ndarray, amplitude: float) -> np.ndarray:
    """Evaluate the series with coefficients ``coeffs[j-1, l-1]`` on ``ys x xs``."""
    d = coeffs.shape[0]
    C = amplitude * mode_weights(d) * coeffs
    return _sines(ys, d) @ C.T @ _sines(xs, d).T


def series_variance(d: int, x, y, amplitude: float = 1.0):
    """Pointwise variance of the series at normalized coordinates ``(x, y)``."""
    lam2 = mode_weights(d) ** 2
    j = np.arange(1, d + 1)
    sx = np.sin(np.pi * j * x) ** 2
    sy = np.sin(np.pi * j * y) ** 2
    return amplitude ** 2 * float(sx @ lam2 @ sy)


def _draw(rng: np.random.Generator, d: int) -> np.ndarray:
    return rng.standard_normal((d, d))


def sample_field(spec: SmoothFieldSpec, geometry: GridGeometry) -> ScalarField:
    coeffs = _draw(np.random.default_rng(spec.seed), spec.d)
    xs = np.linspace(0.0, 1.0, geometry.nx)
    ys = np.linspace(0.0, 1.0, geometry.ny)
    return ScalarField(geometry, series(coeffs, xs, ys, spec.amplitude), 0.0)


def sample_warp(spec_x: SmoothFieldSpec, spec_y: SmoothFieldSpec, level: int,
                geometry: GridGeometry, attempt: int = 0) -> Warp:
    """One draw of both displacement components at the morphing nodes."""
    s = np.linspace(0.0, 1.0, morph_grid_size(level))
    parts = []
    for spec in (spec_x, spec_y):
        rng = np.random.default_rng([spec.seed, attempt])
        parts.append(series(_draw(rng, spec.d), s, s, spec.amplitude))
    return Warp(level, parts[0], parts[1], geometry)


def sample_invertible_warp(spec_x: SmoothFieldSpec, spec_y: SmoothFieldSpec, level: int,
                           geometry: GridGeometry, max_tries: int = 100) -> Warp:
    """Redraw until every mapped quadrant is convex.

    Attempt ``t`` uses the generator streams ``(seed, t)`` of both specs.
    """
    if max_tries < 1:
        raise ValueError("max_tries must be at least 1")
    for attempt in range(max_tries):
        T = sample_warp(spec_x, spec_y, level, geometry, attempt)
        if is_invertible(T):
            if attempt:
                log.debug("warp accepted after %d rejections", attempt)
            return T
    err = WarpSamplingError(f"no invertible warp in {max_tries} draws (acceptance rate 0/{max_tries})")
    err.acceptance_rate = 0.0
    raise err
