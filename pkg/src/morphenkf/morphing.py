"""Registration residuals and morphs between two registered fields.

With ``v ~ u o (I+T)`` the residual ``r = v o (I+T)^{-1} - u`` carries the
amplitude mismatch left after alignment, and

    u_lam = (u + lam * r) o (I + lam * T),   0 <= lam <= 1

moves continuously from ``u`` (lam = 0) to ``v`` (lam = 1, up to the
interpolation error of the morphing grid).
"""

from __future__ import annotations

from dataclasses import dataclass

from .field import ScalarField, Warp, check_invertible, compose, compose_inverse


@dataclass(frozen=True)
class MorphPair:
    """Reference field ``u0`` with residual ``r`` and warp ``T``."""

    u0: ScalarField
    r: ScalarField
    T: Warp

    def __post_init__(self):
        g = self.u0.geometry
        if self.r.geometry != g or self.T.geometry != g:
            raise ValueError("pair members must share one domain")
        check_invertible(self.T)

    @classmethod
    def from_fields(cls, u0: ScalarField, v: ScalarField, T: Warp) -> "MorphPair":
        return cls(u0, residual(u0, v, T), T)


def residual(u0: ScalarField, v: ScalarField, T: Warp) -> ScalarField:
    """``v o (I+T)^{-1} - u0`` at the pixel nodes.

    The boundary value is ``v.boundary_value - u0.boundary_value`` so that the
    residual vanishes far from the features when both fields share it.
    """
    if v.geometry != u0.geometry:
        raise ValueError("fields live on different grids")
    vi = compose_inverse(v, T)
    return ScalarField(u0.geometry, vi.values - u0.values,
                       v.boundary_value - u0.boundary_value)


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"morph parameter must lie in [0, 1], got {lam}")
    return lam


def morph(pair: MorphPair, lam: float) -> ScalarField:
    """Intermediate field ``(u0 + lam*r) o (I + lam*T)``."""
    lam = _check_lambda(lam)
    if lam == 0.0:
        return pair.u0
    T = pair.T * lam
    check_invertible(T)
    return compose(pair.u0 + pair.r * lam, T)


def simple_morph(u0: ScalarField, v: ScalarField, T: Warp, lam: float) -> ScalarField:
    """Cheap variant ``u0 o (I + lam*T) + lam*(v - u0 o (I+T))``.

    Needs no inverse, but the residual stays at the location of ``v`` instead
    of travelling with the feature.
    """
    lam = _check_lambda(lam)
    if lam == 0.0:
        return u0
    if lam == 1.0:
        return v
    return compose(u0, T * lam) + (v - compose(u0, T)) * lam
