"""Perturbed-observation ensemble Kalman filter on plain state vectors.

Ensembles are ``(N, S)`` arrays, one member per row. The observation
operator is row-sparse with one weighted state entry per observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass(frozen=True)
class ObservationSpec:
    """``y_i = weights[i] * x[indices[i]] + eps_i``, ``eps_i ~ N(0, noise_std[i]^2)``."""

    indices: np.ndarray
    data: np.ndarray
    noise_std: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp).ravel()
        data = np.asarray(self.data, dtype=np.float64).ravel()
        std = np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), data.shape).copy()
        w = np.ones(data.shape) if self.weights is None else np.asarray(self.weights, dtype=np.float64).ravel()
        if data.size < 1:
            raise ValueError("at least one observation is required")
        if idx.shape != data.shape or w.shape != data.shape:
            raise ValueError("indices, weights and data must have equal length")
        if not np.all(std > 0):
            raise ValueError("observation noise must be positive")
        if not np.all(np.isfinite(data)):
            raise ValueError("observations must be finite")
        for name, a in (("indices", idx), ("data", data), ("noise_std", std), ("weights", w)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def size(self) -> int:
        return self.data.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """``H x`` for every row of ``X``; returns ``(N, d_obs)``."""
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= X.shape[-1]):
            raise ValueError("observation index outside the state vector")
        return X[..., self.indices] * self.weights


def _as_ensemble(ensemble) -> np.ndarray:
    X = np.asarray(ensemble, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("ensemble must be an (N, S) array")
    if X.shape[0] < 2:
        raise ValueError("an ensemble needs at least two members")
    if not np.all(np.isfinite(X)):
        raise ValueError("ensemble contains non-finite entries")
    return X


def ensemble_stats(ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry sample mean and unbiased variance."""
    X = _as_ensemble(ensemble)
    return X.mean(axis=0), X.var(axis=0, ddof=1)


def _gain_solve(HA: np.ndarray, R: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Solve ``(HA HA^T + (N-1) diag(R)) Z = Y``; ``HA`` is ``(d, N)``."""
    d, N = HA.shape
    P = (N - 1) * R
    if d <= N:
        C = HA @ HA.T
        C[np.diag_indices(d)] += P
        C[np.diag_indices(d)] += 1e-12 * np.trace(C) / d
        return cho_solve(cho_factor(C, lower=True), Y)
    # more observations than members: the N x N form of the same inverse
    PiY = Y / P[:, None]
    PiHA = HA / P[:, None]
    S = HA.T @ PiHA
    S[np.diag_indices(N)] += 1.0
    return PiY - PiHA @ cho_solve(cho_factor(S, lower=True), HA.T @ PiY)


def analyze(ensemble, obs: ObservationSpec, rng_seed) -> np.ndarray:
    """Analysis ensemble ``x_k + K (d + eps_k - H x_k)``.

    The data perturbations ``eps_k`` are drawn from ``N(0, diag(noise_std^2))``
    with a generator seeded by ``rng_seed`` and are not recentred.
    """
    X = _as_ensemble(ensemble)
    N = X.shape[0]
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal((N, obs.size)) * obs.noise_std
    HX = obs.apply(X)
    A = X - X.mean(axis=0)
    HA = HX - HX.mean(axis=0)
    innov = obs.data + eps - HX
    Z = _gain_solve(HA.T, obs.noise_std ** 2, innov.T)
    return X + (HA @ Z).T @ A
