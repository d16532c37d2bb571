"""Gridded fields, warps on the morphing grid, and their algebra.

Fields live on a uniform pixel grid and are extended outside the domain by a
constant boundary value. Warps are displacement fields stored on a coarser
``(2**level + 1)``-square morphing grid and evaluated by bilinear
interpolation. Arrays are indexed ``[row, col] = [y, x]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Points closer than this (in pixel units) to the domain edge count as inside.
EDGE_TOL = 1e-9


class NonInvertibleWarpError(ValueError):
    """Raised when a mapped morphing-grid quadrant is not strictly convex."""

    def __init__(self, quadrant, message=None):
        self.quadrant = quadrant
        if message is None:
            message = f"mapped quadrant (row={quadrant[0]}, col={quadrant[1]}) is not strictly convex"
        super().__init__(message)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridGeometry:
    """Uniform ``nx`` by ``ny`` pixel grid covering ``[x0, x0+Lx] x [y0, y0+Ly]``."""

    nx: int
    ny: int
    Lx: float
    Ly: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 nodes per direction")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain extents must be positive")

    @property
    def hx(self) -> float:
        return self.Lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.Ly / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def diam(self) -> float:
        return float(np.hypot(self.Lx, self.Ly))

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.hx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.y0 + self.hy * np.arange(self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y)

    def contains(self, x, y, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        tx = tol * self.hx
        ty = tol * self.hy
        return ((x >= self.x0 - tx) & (x <= self.x0 + self.Lx + tx)
                & (y >= self.y0 - ty) & (y <= self.y0 + self.Ly + ty))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real function on the pixel grid, constant ``boundary_value`` outside."""

    geometry: GridGeometry
    values: np.ndarray
    boundary_value: float = 0.0

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != self.geometry.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.geometry.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "boundary_value", float(self.boundary_value))

    @classmethod
    def constant(cls, geometry: GridGeometry, value: float) -> "ScalarField":
        return cls(geometry, np.full(geometry.shape, float(value)), value)

    @classmethod
    def from_function(cls, geometry: GridGeometry, func: Callable, boundary_value: float = 0.0):
        X, Y = geometry.mesh()
        return cls(geometry, func(X, Y), boundary_value)

    def with_values(self, values, boundary_value=None) -> "ScalarField":
        bv = self.boundary_value if boundary_value is None else boundary_value
        return ScalarField(self.geometry, values, bv)

    def _check(self, other: "ScalarField"):
        if other.geometry != self.geometry:
            raise ValueError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, ScalarField):
            self._check(other)
            return ScalarField(self.geometry, self.values + other.values,
                               self.boundary_value + other.boundary_value)
        return ScalarField(self.geometry, self.values + other, self.boundary_value + other)

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            self._check(other)
            return ScalarField(self.geometry, self.values - other.values,
                               self.boundary_value - other.boundary_value)
        return ScalarField(self.geometry, self.values - other, self.boundary_value - other)

    def __mul__(self, c: float):
        return ScalarField(self.geometry, self.values * c, self.boundary_value * c)

    __rmul__ = __mul__

    def __call__(self, x, y):
        return eval_field(self, x, y)


def sample_pixel_coords(values: np.ndarray, boundary_value: float, px, py) -> np.ndarray:
    """Bilinear interpolation at fractional pixel indices with constant extension.

    Integer indices reproduce nodal values exactly.
    """
    ny, nx = values.shape
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = ((px >= -EDGE_TOL) & (px <= nx - 1 + EDGE_TOL)
              & (py >= -EDGE_TOL) & (py <= ny - 1 + EDGE_TOL))
    X = np.clip(px, 0.0, nx - 1.0)
    Y = np.clip(py, 0.0, ny - 1.0)
    i = np.minimum(X.astype(np.intp), nx - 2)
    k = np.minimum(Y.astype(np.intp), ny - 2)
    fx = X - i
    fy = Y - k
    out = ((1.0 - fy) * ((1.0 - fx) * values[k, i] + fx * values[k, i + 1])
           + fy * ((1.0 - fx) * values[k + 1, i] + fx * values[k + 1, i + 1]))
    return np.where(inside, out, boundary_value)


def eval_field(f: ScalarField, x, y):
    """Evaluate ``f`` at physical points; ``boundary_value`` outside the domain."""
    g = f.geometry
    px = (np.asarray(x, dtype=float) - g.x0) / g.hx
    py = (np.asarray(y, dtype=float) - g.y0) / g.hy
    out = sample_pixel_coords(f.values, f.boundary_value, px, py)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Warps


def morph_grid_size(level: int) -> int:
    return 2 ** level + 1


@dataclass(frozen=True, eq=False)
class Warp:
    """Displacements ``(tx, ty)`` in meters on the level-``level`` morphing grid."""

    level: int
    tx: np.ndarray
    ty: np.ndarray
    geometry: GridGeometry = field(repr=False)

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("warp level must be >= 1")
        m = morph_grid_size(self.level)
        tx, ty = _frozen(self.tx), _frozen(self.ty)
        if tx.shape != (m, m) or ty.shape != (m, m):
            raise ValueError(f"warp arrays must have shape {(m, m)}")
        if not (np.all(np.isfinite(tx)) and np.all(np.isfinite(ty))):
            raise ValueError("warp displacements must be finite")
        object.__setattr__(self, "tx", tx)
        object.__setattr__(self, "ty", ty)

    @classmethod
    def zero(cls, level: int, geometry: GridGeometry) -> "Warp":
        m = morph_grid_size(level)
        return cls(level, np.zeros((m, m)), np.zeros((m, m)), geometry)

    @property
    def m(self) -> int:
        return morph_grid_size(self.level)

    @property
    def spacing(self) -> tuple[float, float]:
        n = 2 ** self.level
        return self.geometry.Lx / n, self.geometry.Ly / n

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.geometry
        s = np.linspace(0.0, 1.0, self.m)
        return np.meshgrid(g.x0 + g.Lx * s, g.y0 + g.Ly * s)

    def mapped_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = self.node_coords()
        return X + self.tx, Y + self.ty

    def _check(self, other: "Warp"):
        if other.level != self.level or other.geometry != self.geometry:
            raise ValueError("warps live on different grids")

    def __add__(self, other: "Warp") -> "Warp":
        self._check(other)
        return Warp(self.level, self.tx + other.tx, self.ty + other.ty, self.geometry)

    def __sub__(self, other: "Warp") -> "Warp":
        self._check(other)
        return Warp(self.level, self.tx - other.tx, self.ty - other.ty, self.geometry)

    def __mul__(self, c: float) -> "Warp":
        return Warp(self.level, self.tx * c, self.ty * c, self.geometry)

    __rmul__ = __mul__

    def __call__(self, x, y):
        return eval_warp(self, x, y)


def _cell_coords(g, n_cells):
    """Split grid coordinates ``g`` in ``[0, n_cells]`` into cell index and offset."""
    g = np.clip(g, 0.0, float(n_cells))
    c = np.minimum(g.astype(np.intp), n_cells - 1)
    return c, g - c


def _bilinear_nodes(a: np.ndarray, c, s, r, t):
    return ((1.0 - t) * ((1.0 - s) * a[r, c] + s * a[r, c + 1])
            + t * ((1.0 - s) * a[r + 1, c] + s * a[r + 1, c + 1]))


def warp_displacement(T: Warp, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly interpolated displacement at physical points (clamped to D)."""
    g = T.geometry
    n = 2 ** T.level
    gx = (np.asarray(x, dtype=float) - g.x0) / g.Lx * n
    gy = (np.asarray(y, dtype=float) - g.y0) / g.Ly * n
    c, s = _cell_coords(gx, n)
    r, t = _cell_coords(gy, n)
    return _bilinear_nodes(T.tx, c, s, r, t), _bilinear_nodes(T.ty, c, s, r, t)


def pixel_displacement(T: Warp) -> tuple[np.ndarray, np.ndarray]:
    """Displacement of every pixel node, in meters, shape ``geometry.shape``."""
    g = T.geometry
    n = 2 ** T.level
    gx = np.arange(g.nx) * n / (g.nx - 1)
    gy = np.arange(g.ny) * n / (g.ny - 1)
    c, s = _cell_coords(gx, n)
    r, t = _cell_coords(gy, n)
    C, R = np.meshgrid(c, r)
    S, Tt = np.meshgrid(s, t)
    return _bilinear_nodes(T.tx, C, S, R, Tt), _bilinear_nodes(T.ty, C, S, R, Tt)


def eval_warp(T: Warp, x, y):
    """Return ``(I+T)(x, y)``; points must lie in the domain."""
    g = T.geometry
    if not np.all(g.contains(x, y, tol=EDGE_TOL)):
        raise ValueError("warps are only defined on the domain")
    dx, dy = warp_displacement(T, x, y)
    xo = np.asarray(x, dtype=float) + dx
    yo = np.asarray(y, dtype=float) + dy
    if xo.ndim == 0:
        return float(xo), float(yo)
    return xo, yo


def compose(f: ScalarField, T: Warp) -> ScalarField:
    """``f o (I+T)`` sampled at the pixel nodes of ``f``."""
    g = f.geometry
    if T.geometry != g:
        raise ValueError("field and warp have different domains")
    dx, dy = pixel_displacement(T)
    px = np.arange(g.nx)[None, :] + dx / g.hx
    py = np.arange(g.ny)[:, None] + dy / g.hy
    vals = sample_pixel_coords(f.values, f.boundary_value, px, py)
    return ScalarField(g, vals, f.boundary_value)


# ---------------------------------------------------------------------------
# Convexity and inversion


def quad_cross_products(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Vertex cross products of every quadrant, shape ``(m-1, m-1, 4)``.

    Vertices are taken counterclockwise: (r,c), (r,c+1), (r+1,c+1), (r+1,c).
    A quadrant is strictly convex iff all four entries are positive.
    """
    vx = np.stack([X[:-1, :-1], X[:-1, 1:], X[1:, 1:], X[1:, :-1]], axis=-1)
    vy = np.stack([Y[:-1, :-1], Y[:-1, 1:], Y[1:, 1:], Y[1:, :-1]], axis=-1)
    ax = vx - np.roll(vx, 1, axis=-1)
    ay = vy - np.roll(vy, 1, axis=-1)
    bx = np.roll(vx, -1, axis=-1) - vx
    by = np.roll(vy, -1, axis=-1) - vy
    return ax * by - ay * bx


def nonconvex_quadrants(T: Warp) -> np.ndarray:
    """Indices ``(row, col)`` of mapped quadrants that are not strictly convex."""
    X, Y = T.mapped_nodes()
    cp = quad_cross_products(X, Y)
    return np.argwhere(~np.all(cp > 0.0, axis=-1))


def boundary_nodes_inside(T: Warp) -> bool:
    X, Y = T.mapped_nodes()
    g = T.geometry
    edge = np.zeros(X.shape, dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    return bool(np.all(g.contains(X[edge], Y[edge], tol=EDGE_TOL)))


def is_invertible(T: Warp) -> bool:
    return len(nonconvex_quadrants(T)) == 0


def check_invertible(T: Warp) -> None:
    bad = nonconvex_quadrants(T)
    if len(bad):
        raise NonInvertibleWarpError(tuple(int(i) for i in bad[0]))


def is_valid_warp(T: Warp) -> bool:
    """Strictly convex quadrants and boundary-node images inside the domain."""
    return is_invertible(T) and boundary_nodes_inside(T)


def _solve_bilinear(qx, qy, p00, p10, p11, p01):
    """Local coordinates ``(s, t)`` with ``P(s, t) = q`` for one quadrant.

    Solves the quadratic in ``s`` analytically and polishes with Newton steps.
    Inputs ``qx, qy`` are arrays; corners are ``(x, y)`` tuples.
    """
    ex, ey = p10[0] - p00[0], p10[1] - p00[1]
    fx, fy = p01[0] - p00[0], p01[1] - p00[1]
    gx = p11[0] - p10[0] - p01[0] + p00[0]
    gy = p11[1] - p10[1] - p01[1] + p00[1]
    wx, wy = qx - p00[0], qy - p00[1]

    a = ex * gy - ey * gx
    b = (ex * fy - ey * fx) - (wx * gy - wy * gx)
    c = -(wx * fy - wy * fx)
    scale = abs(ex * fy - ey * fx)
    if abs(a) <= 1e-14 * scale:
        s = -c / b
    else:
        disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
        qq = -0.5 * (b + np.copysign(disc, b))
        with np.errstate(divide="ignore", invalid="ignore"):
            s1 = qq / a
            s2 = np.where(qq != 0.0, c / qq, s1)
        d1 = np.maximum(-s1, s1 - 1.0)
        d2 = np.maximum(-s2, s2 - 1.0)
        s = np.where(np.nan_to_num(d1, nan=np.inf) <= np.nan_to_num(d2, nan=np.inf), s1, s2)
    dx = fx + s * gx
    dy = fy + s * gy
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(dx) > np.abs(dy), (wx - s * ex) / dx, (wy - s * ey) / dy)
    for _ in range(2):
        rx = ex * s + fx * t + gx * s * t - wx
        ry = ey * s + fy * t + gy * s * t - wy
        j11 = ex + gx * t
        j12 = fx + gx * s
        j21 = ey + gy * t
        j22 = fy + gy * s
        det = j11 * j22 - j12 * j21
        with np.errstate(divide="ignore", invalid="ignore"):
            s = s - (j22 * rx - j12 * ry) / det
            t = t - (-j21 * rx + j11 * ry) / det
    return s, t


class InverseWarp:
    """Callable evaluating ``(I+T)^{-1}`` by per-quadrant analytic inversion.

    Points outside the image of the domain are mapped to the preimage of the
    nearest point on the mapped domain boundary.
    """

    def __init__(self, T: Warp):
        check_invertible(T)
        self.warp = T
        self._X, self._Y = T.mapped_nodes()
        self._Xo, self._Yo = T.node_coords()

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        qx = np.broadcast_to(x, shape).ravel()
        qy = np.broadcast_to(y, shape).ravel()
        ox = np.full(qx.shape, np.nan)
        oy = np.full(qx.shape, np.nan)
        found = np.zeros(qx.shape, dtype=bool)
        X, Y = self._X, self._Y
        T = self.warp
        hx, hy = T.spacing
        g = T.geometry
        n = T.m - 1
        tol = 1e-10
        for r in range(n):
            for c in range(n):
                cx = X[r:r + 2, c:c + 2]
                cy = Y[r:r + 2, c:c + 2]
                pad = 1e-9 * (hx + hy)
                sel = np.flatnonzero(~found
                                     & (qx >= cx.min() - pad) & (qx <= cx.max() + pad)
                                     & (qy >= cy.min() - pad) & (qy <= cy.max() + pad))
                if sel.size == 0:
                    continue
                s, t = _solve_bilinear(qx[sel], qy[sel],
                                       (X[r, c], Y[r, c]), (X[r, c + 1], Y[r, c + 1]),
                                       (X[r + 1, c + 1], Y[r + 1, c + 1]), (X[r + 1, c], Y[r + 1, c]))
                ok = (s >= -tol) & (s <= 1 + tol) & (t >= -tol) & (t <= 1 + tol)
                idx = sel[ok]
                ox[idx] = g.x0 + (c + np.clip(s[ok], 0.0, 1.0)) * hx
                oy[idx] = g.y0 + (r + np.clip(t[ok], 0.0, 1.0)) * hy
                found[idx] = True
        if not np.all(found):
            miss = np.flatnonzero(~found)
            ox[miss], oy[miss] = self._clamp_to_boundary(qx[miss], qy[miss])
        ox = ox.reshape(shape)
        oy = oy.reshape(shape)
        if ox.ndim == 0:
            return float(ox), float(oy)
        return ox, oy

    def _boundary_polyline(self):
        X, Y, Xo, Yo = self._X, self._Y, self._Xo, self._Yo
        ring = []
        n = X.shape[0] - 1
        ring += [(0, c) for c in range(n)]
        ring += [(r, n) for r in range(n)]
        ring += [(n, c) for c in range(n, 0, -1)]
        ring += [(r, 0) for r in range(n, 0, -1)]
        ring.append(ring[0])
        idx = np.array(ring)
        return (X[idx[:, 0], idx[:, 1]], Y[idx[:, 0], idx[:, 1]],
                Xo[idx[:, 0], idx[:, 1]], Yo[idx[:, 0], idx[:, 1]])

    def _clamp_to_boundary(self, qx, qy):
        bx, by, bxo, byo = self._boundary_polyline()
        ax, ay = bx[:-1], by[:-1]
        dx, dy = bx[1:] - ax, by[1:] - ay
        L2 = dx * dx + dy * dy
        tau = ((qx[:, None] - ax) * dx + (qy[:, None] - ay) * dy) / L2
        tau = np.clip(tau, 0.0, 1.0)
        px = ax + tau * dx
        py = ay + tau * dy
        d2 = (qx[:, None] - px) ** 2 + (qy[:, None] - py) ** 2
        best = np.argmin(d2, axis=1)
        tb = tau[np.arange(len(qx)), best]
        # bilinear maps restricted to an edge are affine, so the preimage is exact
        ox = bxo[best] + tb * (bxo[best + 1] - bxo[best])
        oy = byo[best] + tb * (byo[best + 1] - byo[best])
        return ox, oy


def invert_warp(T: Warp) -> InverseWarp:
    return InverseWarp(T)


def compose_inverse(f: ScalarField, T: Warp) -> ScalarField:
    """``f o (I+T)^{-1}`` sampled at the pixel nodes of ``f``."""
    g = f.geometry
    if T.geometry != g:
        raise ValueError("field and warp have different domains")
    if not (np.any(T.tx) or np.any(T.ty)):
        # the identity needs no resampling and stays node-exact
        return ScalarField(g, np.array(f.values), f.boundary_value)
    X, Y = g.mesh()
    xi, yi = invert_warp(T)(X, Y)
    return ScalarField(g, eval_field(f, xi, yi), f.boundary_value)


# ---------------------------------------------------------------------------
# Grid hierarchy


def restrict_warp(T: Warp, level: int) -> Warp:
    """Sample ``T`` at the nodes of the coarser level-``level`` grid."""
    if not 1 <= level < T.level:
        raise ValueError(f"restriction level must be in [1, {T.level - 1}], got {level}")
    step = 2 ** (T.level - level)
    return Warp(level, T.tx[::step, ::step], T.ty[::step, ::step], T.geometry)


def interp_warp(T: Warp, level: int) -> Warp:
    """Bilinear interpolation of ``T`` onto the finer level-``level`` grid."""
    if level <= T.level or level > 16:
        raise ValueError(f"interpolation level must exceed {T.level}, got {level}")
    n = 2 ** T.level
    g = np.arange(2 ** level + 1) * n / 2 ** level
    c, s = _cell_coords(g, n)
    C, R = np.meshgrid(c, c)
    S, Tt = np.meshgrid(s, s)
    return Warp(level, _bilinear_nodes(T.tx, C, S, R, Tt),
                _bilinear_nodes(T.ty, C, S, R, Tt), T.geometry)


def to_level(T: Warp, level: int) -> Warp:
    if level == T.level:
        return T
    return restrict_warp(T, level) if level < T.level else interp_warp(T, level)
