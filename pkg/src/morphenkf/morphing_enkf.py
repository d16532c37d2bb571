"""EnKF on registration representations of fire-model states.

Every member ``U_k = (w_k, z_k)`` is written as a morph of a fixed reference
``U0 = (w0, z0)``: a warp ``T_k`` registering ``w0`` onto ``w_k`` and residuals
``r_w = w_k o (I+T_k)^{-1} - w0``. The filter updates the packed vectors
``[r_w | r_z | tx | ty]`` and each analysis member is rebuilt as

    w^a = (w0 + r_w^a) o (I + T^a),   z^a = (z0 + r_z^a) o (I + T^a).
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import io
from .enkf import ObservationSpec, analyze
from .field import GridGeometry, ScalarField, Warp, compose, is_invertible, morph_grid_size
from .firemodel import ModelState
from .morphing import residual
from .registration import RegistrationConfig, RegistrationReport, register

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationRepState:
    r_w: ScalarField
    r_z: ScalarField
    T: Warp

    def __post_init__(self):
        g = self.r_w.geometry
        if self.r_z.geometry != g or self.T.geometry != g:
            raise ValueError("representation parts must share one domain")

    @property
    def geometry(self) -> GridGeometry:
        return self.r_w.geometry


@dataclass(frozen=True)
class ReferenceState:
    U0: ModelState

    @property
    def geometry(self) -> GridGeometry:
        return self.U0.geometry


@dataclass(frozen=True)
class MorphingEnKFConfig:
    """Settings of one morphing analysis.

    ``sigma_r`` (K) and ``sigma_T`` (m) are the data error standard deviations
    of the residual and warp blocks. With ``assimilate_fuel`` the fuel residual
    is registered and carried in the state; otherwise it is zero.
    """

    registration: RegistrationConfig = RegistrationConfig()
    sigma_r: float = 50.0
    sigma_T: float = 5.0
    assimilate_fuel: bool = False
    max_halvings: int = 10
    workers: int = 1

    def __post_init__(self):
        if not (self.sigma_r > 0 and self.sigma_T > 0):
            raise ValueError("data error standard deviations must be positive")
        if self.max_halvings < 0 or self.workers < 1:
            raise ValueError("max_halvings >= 0 and workers >= 1 required")


# ---------------------------------------------------------------------------
# Representation transforms


def to_registration_rep(U: ModelState, ref: ReferenceState, T_init: Optional[Warp] = None,
                        cfg: MorphingEnKFConfig = MorphingEnKFConfig()
                        ) -> tuple[RegistrationRepState, RegistrationReport]:
    """Register ``w0`` onto ``U.w`` and form the residuals."""
    if U.geometry != ref.geometry:
        raise ValueError("state and reference live on different grids")
    w0, z0 = ref.U0.w, ref.U0.z
    T, report = register(w0, U.w, T_init, cfg.registration)
    r_w = residual(w0, U.w, T)
    if cfg.assimilate_fuel:
        r_z = residual(z0, U.z, T)
    else:
        r_z = ScalarField(U.geometry, np.zeros(U.geometry.shape), U.z.boundary_value - z0.boundary_value)
    return RegistrationRepState(r_w, r_z, T), report


def from_registration_rep(rep: RegistrationRepState, ref: ReferenceState) -> ModelState:
    """Morph the reference by ``rep``; fuel is clipped to ``[0, 1]``."""
    if rep.geometry != ref.geometry:
        raise ValueError("representation and reference live on different grids")
    w = compose(ref.U0.w + rep.r_w, rep.T)
    z = compose(ref.U0.z + rep.r_z, rep.T)
    z = z.with_values(np.clip(z.values, 0.0, 1.0), min(max(z.boundary_value, 0.0), 1.0))
    return ModelState(w, z)


def state_size(geometry: GridGeometry, level: int) -> int:
    return 2 * geometry.nx * geometry.ny + 2 * morph_grid_size(level) ** 2


def _blocks(geometry: GridGeometry, level: int) -> dict:
    n = geometry.nx * geometry.ny
    mm = morph_grid_size(level) ** 2
    return {"r_w": slice(0, n), "r_z": slice(n, 2 * n),
            "tx": slice(2 * n, 2 * n + mm), "ty": slice(2 * n + mm, 2 * n + 2 * mm)}


def pack(rep: RegistrationRepState) -> np.ndarray:
    """``[r_w | r_z | tx | ty]``, each block row-major."""
    return np.concatenate([rep.r_w.values.ravel(), rep.r_z.values.ravel(),
                           rep.T.tx.ravel(), rep.T.ty.ravel()])


def unpack(vec, geometry: GridGeometry, level: int,
           r_w_boundary: float = 0.0, r_z_boundary: float = 0.0) -> RegistrationRepState:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (state_size(geometry, level),):
        raise ValueError(f"state vector must have length {state_size(geometry, level)}, got {vec.shape}")
    b = _blocks(geometry, level)
    m = morph_grid_size(level)
    shape = geometry.shape
    return RegistrationRepState(
        ScalarField(geometry, vec[b["r_w"]].reshape(shape), r_w_boundary),
        ScalarField(geometry, vec[b["r_z"]].reshape(shape), r_z_boundary),
        Warp(level, vec[b["tx"]].reshape(m, m), vec[b["ty"]].reshape(m, m), geometry))


def observation_spec(data_vec: np.ndarray, geometry: GridGeometry, level: int,
                     sigma_r: float, sigma_T: float) -> ObservationSpec:
    """Identity observation of the ``r_w``, ``tx`` and ``ty`` blocks."""
    b = _blocks(geometry, level)
    idx = np.concatenate([np.arange(b["r_w"].start, b["r_w"].stop),
                          np.arange(b["tx"].start, b["ty"].stop)])
    std = np.where(idx < b["r_w"].stop, sigma_r, sigma_T)
    return ObservationSpec(idx, data_vec[idx], std)


def mean_distance_to_data(X: np.ndarray, obs: ObservationSpec) -> float:
    """Mean over members of the noise-scaled Euclidean distance to the data."""
    D = (obs.apply(np.asarray(X)) - obs.data) / obs.noise_std
    return float(np.mean(np.sqrt(np.sum(D * D, axis=1))))


def limit_warp_increment(T_f: Warp, T_a: Warp, max_halvings: int = 10) -> tuple[Warp, float]:
    """Scale ``T_a - T_f`` by powers of 1/2 until ``I + T`` is invertible.

    Returns the accepted warp and the scale applied; scale 0 means the forecast
    warp was kept.
    """
    if is_invertible(T_a):
        return T_a, 1.0
    delta = T_a - T_f
    scale = 1.0
    for _ in range(max_halvings):
        scale *= 0.5
        T = T_f + delta * scale
        if is_invertible(T):
            return T, scale
    return T_f, 0.0


# ---------------------------------------------------------------------------
# Analysis


@dataclass
class AnalysisResult:
    members: list
    forecast_reps: list
    analysis_reps: list
    data_rep: RegistrationRepState
    forecast_vectors: np.ndarray
    analysis_vectors: np.ndarray
    obs: ObservationSpec
    increment_scales: list
    reports: list = field(default_factory=list)
    data_report: Optional[RegistrationReport] = None

    @property
    def forecast_distance(self) -> float:
        return mean_distance_to_data(self.forecast_vectors, self.obs)

    @property
    def analysis_distance(self) -> float:
        return mean_distance_to_data(self.analysis_vectors, self.obs)


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def morphing_analysis(ensemble: Sequence[ModelState], ref: ReferenceState, data: ScalarField,
                      cfg: MorphingEnKFConfig = MorphingEnKFConfig(), seed=0,
                      T_init: Optional[Sequence[Optional[Warp]]] = None,
                      data_T_init: Optional[Warp] = None) -> AnalysisResult:
    """Register members and data against ``ref``, update, rebuild members.

    ``T_init`` holds optional warm-start warps per member (typically the
    previous analysis warps), ``data_T_init`` the one for the data.
    """
    N = len(ensemble)
    if N < 2:
        raise ValueError("an ensemble needs at least two members")
    g = ref.geometry
    level = cfg.registration.M
    if T_init is None:
        T_init = [None] * N
    if len(T_init) != N:
        raise ValueError("one warm-start warp per member is required")

    jobs = [(U, T0) for U, T0 in zip(ensemble, T_init)] + [(ModelState(data, ref.U0.z), data_T_init)]
    regs = _map(lambda job: to_registration_rep(job[0], ref, job[1], cfg), jobs, cfg.workers)
    forecast_reps = [r for r, _ in regs[:N]]
    reports = [rep for _, rep in regs[:N]]
    data_rep, data_report = regs[N]

    Xf = np.stack([pack(r) for r in forecast_reps])
    obs = observation_spec(pack(data_rep), g, level, cfg.sigma_r, cfg.sigma_T)
    Xa = analyze(Xf, obs, seed)

    analysis_reps, scales = [], []
    bv_w = forecast_reps[0].r_w.boundary_value
    bv_z = forecast_reps[0].r_z.boundary_value
    for k in range(N):
        rep = unpack(Xa[k], g, level, bv_w, bv_z)
        T, scale = limit_warp_increment(forecast_reps[k].T, rep.T, cfg.max_halvings)
        if scale != 1.0:
            log.info("member %d: analysis warp increment scaled by %g", k, scale)
            rep = RegistrationRepState(rep.r_w, rep.r_z, T)
            Xa[k] = pack(rep)
        analysis_reps.append(rep)
        scales.append(scale)
    members = _map(lambda rep: from_registration_rep(rep, ref), analysis_reps, cfg.workers)
    return AnalysisResult(members, forecast_reps, analysis_reps, data_rep, Xf, Xa, obs,
                          scales, reports, data_report)


# ---------------------------------------------------------------------------
# Checkpoints


MANIFEST = "manifest.txt"


def write_checkpoint(directory, members: Sequence[ModelState], reps: Sequence[RegistrationRepState]) -> str:
    """Write member states and representations plus a manifest; returns its path."""
    io.ensure_dir(directory)
    lines = []
    for k, (U, rep) in enumerate(zip(members, reps)):
        names = {"w": f"w_{k:03d}.mkf", "z": f"z_{k:03d}.mkf", "T": f"T_{k:03d}.mkw",
                 "r_w": f"r_w_{k:03d}.mkf"}
        io.write_field(os.path.join(directory, names["w"]), U.w)
        io.write_field(os.path.join(directory, names["z"]), U.z)
        io.write_warp(os.path.join(directory, names["T"]), rep.T)
        io.write_field(os.path.join(directory, names["r_w"]), rep.r_w)
        lines.append(f"member={k} " + " ".join(f"{key}={val}" for key, val in names.items()))
    path = os.path.join(directory, MANIFEST)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_checkpoint(directory) -> list[dict]:
    """Load every manifest entry as ``{"w", "z", "T", "r_w"}``."""
    entries = []
    with open(os.path.join(directory, MANIFEST)) as fh:
        for line in fh:
            if not line.strip():
                continue
            kv = dict(part.split("=", 1) for part in line.split())
            w = io.read_field(os.path.join(directory, kv["w"]))
            entries.append({
                "member": int(kv["member"]),
                "w": w,
                "z": io.read_field(os.path.join(directory, kv["z"])),
                "T": io.read_warp(os.path.join(directory, kv["T"]), w.geometry),
                "r_w": io.read_field(os.path.join(directory, kv["r_w"])),
            })
    return entries
