"""Binary field (MKF1) and warp (MKW1) files, CSV export."""

from __future__ import annotations

import os

import numpy as np

from .field import GridGeometry, ScalarField, Warp, check_invertible, morph_grid_size

_LE = np.dtype("<f8")


def write_field(path, f: ScalarField) -> None:
    g = f.geometry
    header = f"MKF1 {g.nx} {g.ny} {g.x0!r} {g.y0!r} {g.Lx!r} {g.Ly!r} {f.boundary_value!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(f.values, dtype=_LE).tobytes())


def read_field(path) -> ScalarField:
    with open(path, "rb") as fh:
        parts = fh.readline().decode("ascii").split()
        if len(parts) != 8 or parts[0] != "MKF1":
            raise ValueError(f"{path}: not an MKF1 file")
        nx, ny = int(parts[1]), int(parts[2])
        x0, y0, Lx, Ly, bv = (float(p) for p in parts[3:])
        data = np.frombuffer(fh.read(), dtype=_LE)
    if data.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {data.size}")
    geom = GridGeometry(nx, ny, Lx, Ly, x0, y0)
    return ScalarField(geom, data.reshape(ny, nx).astype(np.float64), bv)


def write_warp(path, T: Warp) -> None:
    with open(path, "wb") as fh:
        fh.write(f"MKW1 {T.level}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(T.tx, dtype=_LE).tobytes())
        fh.write(np.ascontiguousarray(T.ty, dtype=_LE).tobytes())


def read_warp(path, geometry: GridGeometry, check: bool = True) -> Warp:
    """Load a warp; the file does not carry the domain, so it is supplied."""
    with open(path, "rb") as fh:
        parts = fh.readline().decode("ascii").split()
        if len(parts) != 2 or parts[0] != "MKW1":
            raise ValueError(f"{path}: not an MKW1 file")
        level = int(parts[1])
        data = np.frombuffer(fh.read(), dtype=_LE)
    m = morph_grid_size(level)
    if data.size != 2 * m * m:
        raise ValueError(f"{path}: expected {2 * m * m} values, found {data.size}")
    T = Warp(level, data[: m * m].reshape(m, m), data[m * m:].reshape(m, m), geometry)
    if check:
        check_invertible(T)
    return T


def write_csv(path, f: ScalarField) -> None:
    X, Y = f.geometry.mesh()
    table = np.column_stack([X.ravel(), Y.ravel(), f.values.ravel()])
    np.savetxt(path, table, delimiter=",", header="x,y,value", comments="", fmt="%.17g")


def write_warp_csv(path, T: Warp) -> None:
    X, Y = T.node_coords()
    table = np.column_stack([X.ravel(), Y.ravel(), T.tx.ravel(), T.ty.ravel()])
    np.savetxt(path, table, delimiter=",", header="x,y,tx,ty", comments="", fmt="%.17g")


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
