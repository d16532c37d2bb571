"""Ensemble diagnostics: kernel densities and Anderson-Darling normality maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import gaussian_kde

from .field import GridGeometry, ScalarField

PMAP_FLOOR = 1e-8
# the exponential tail of the p-value fit turns upward beyond this point
_AD_TAIL_MIN = 5.709 / (2 * 0.0186)


@dataclass(frozen=True)
class Density:
    points: np.ndarray
    density: np.ndarray
    bandwidth: float


def kde(samples, bandwidth_factor: float = 0.3, eval_points=None, n_points: int = 512) -> Density:
    """Gaussian kernel density with bandwidth ``bandwidth_factor * std``.

    Without ``eval_points`` the density is evaluated on ``n_points`` equally
    spaced points covering five bandwidths beyond the sample extremes.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2 or not np.all(np.isfinite(x)):
        raise ValueError("kde needs at least two finite samples")
    std = x.std(ddof=1)
    if not std > 0:
        raise ValueError("kde of a sample with zero variance")
    h = bandwidth_factor * std
    if eval_points is None:
        eval_points = np.linspace(x.min() - 5 * h, x.max() + 5 * h, n_points)
    pts = np.asarray(eval_points, dtype=np.float64)
    dens = gaussian_kde(x, bw_method=bandwidth_factor)(pts.ravel()).reshape(pts.shape)
    return Density(pts, dens, h)


def _ad_pvalue(a_star: np.ndarray) -> np.ndarray:
    a = np.minimum(a_star, _AD_TAIL_MIN)
    with np.errstate(over="ignore"):
        p = np.where(
            a >= 0.6, np.exp(1.2937 - 5.709 * a + 0.0186 * a * a),
            np.where(a >= 0.34, np.exp(0.9177 - 4.279 * a - 1.38 * a * a),
                     np.where(a >= 0.2, 1.0 - np.exp(-8.318 + 42.796 * a - 59.938 * a * a),
                              1.0 - np.exp(-13.436 + 101.14 * a - 223.73 * a * a))))
    return np.clip(p, 0.0, 1.0)


@dataclass(frozen=True)
class ADResult:
    statistic: np.ndarray
    corrected: np.ndarray
    pvalue: np.ndarray
    degenerate: np.ndarray


def anderson_darling(samples, axis: int = 0) -> ADResult:
    """Anderson-Darling normality test with estimated mean and variance.

    Works along ``axis`` so a whole ensemble of fields is tested at once.
    Samples with zero spread get p = 0 and are flagged ``degenerate``.
    """
    x = np.moveaxis(np.asarray(samples, dtype=np.float64), axis, 0)
    n = x.shape[0]
    if n < 3:
        raise ValueError("the Anderson-Darling test needs at least 3 samples")
    xs = np.sort(x, axis=0, kind="stable")
    mean = xs.mean(axis=0)
    std = xs.std(axis=0, ddof=1)
    degenerate = ~(std > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = (xs - mean) / np.where(degenerate, 1.0, std)
    i = np.arange(1, n + 1).reshape((n,) + (1,) * (x.ndim - 1))
    s = np.sum((2 * i - 1) * (log_ndtr(y) + log_ndtr(-y[::-1])), axis=0)
    a2 = -n - s / n
    a_star = a2 * (1.0 + 0.75 / n + 2.25 / n ** 2)
    p = np.where(degenerate, 0.0, _ad_pvalue(a_star))
    return ADResult(a2, a_star, p, degenerate)


def anderson_darling_p(samples) -> float:
    x = np.asarray(samples, dtype=np.float64).ravel()
    return float(anderson_darling(x).pvalue)


def pvalue_map(samples, geometry: GridGeometry) -> tuple[ScalarField, np.ndarray]:
    """Per-pixel p-values of an ``(N, ny, nx)`` ensemble.

    Values are clamped to ``[1e-8, 1]`` for log-scale display; the second
    return value flags pixels where all members agree.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.shape[1:] != geometry.shape:
        raise ValueError("samples must have shape (N,) + geometry.shape")
    res = anderson_darling(X, axis=0)
    p = np.clip(res.pvalue, PMAP_FLOOR, 1.0)
    return ScalarField(geometry, p, 1.0), res.degenerate


def fireline_band(w: np.ndarray, contour: float = 800.0) -> np.ndarray:
    """Pixels on either side of the ``contour`` level line of ``w``."""
    hot = np.asarray(w) >= contour
    band = np.zeros(hot.shape, dtype=bool)
    dx = hot[:, 1:] != hot[:, :-1]
    dy = hot[1:, :] != hot[:-1, :]
    band[:, 1:] |= dx
    band[:, :-1] |= dx
    band[1:, :] |= dy
    band[:-1, :] |= dy
    return band


def max_variance_pixel(samples) -> tuple[int, int]:
    """``(row, col)`` of the pixel with the largest ensemble variance."""
    var = np.asarray(samples, dtype=np.float64).var(axis=0, ddof=1)
    return tuple(int(i) for i in np.unravel_index(np.argmax(var), var.shape))


def write_density_csv(path, d: Density) -> None:
    np.savetxt(path, np.column_stack([d.points, d.density]), delimiter=",",
               header="x,density", comments="", fmt="%.17g")
