import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sine_warp
from morphenkf import io
from morphenkf.field import (
    GridGeometry,
    NonInvertibleWarpError,
    ScalarField,
    Warp,
    check_invertible,
    compose,
    compose_inverse,
    eval_field,
    eval_warp,
    interp_warp,
    invert_warp,
    is_invertible,
    nonconvex_quadrants,
    pixel_displacement,
    restrict_warp,
    warp_displacement,
)
from morphenkf.randomfields import SmoothFieldSpec, sample_invertible_warp


def bilinear_oracle(values, x0, y0, hx, hy, bv, x, y):
    """Textbook bilinear interpolation, one point at a time."""
    ny, nx = values.shape
    fx = (x - x0) / hx
    fy = (y - y0) / hy
    if fx < 0 or fy < 0 or fx > nx - 1 or fy > ny - 1:
        return bv
    i = min(int(np.floor(fx)), nx - 2)
    k = min(int(np.floor(fy)), ny - 2)
    a, b = fx - i, fy - k
    return ((1 - a) * (1 - b) * values[k, i] + a * (1 - b) * values[k, i + 1]
            + (1 - a) * b * values[k + 1, i] + a * b * values[k + 1, i + 1])


def test_eval_field_matches_bilinear_oracle(geom, rng):
    f = ScalarField(geom, rng.normal(size=geom.shape), -3.0)
    xs = rng.uniform(-5, geom.Lx + 5, 300)
    ys = rng.uniform(-5, geom.Ly + 5, 300)
    got = eval_field(f, xs, ys)
    want = [bilinear_oracle(f.values, 0, 0, geom.hx, geom.hy, -3.0, x, y) for x, y in zip(xs, ys)]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_eval_field_reproduces_nodes(geom, rng):
    f = ScalarField(geom, rng.normal(size=geom.shape), 0.0)
    X, Y = geom.mesh()
    assert np.array_equal(eval_field(f, X, Y), f.values)


def test_field_arithmetic_tracks_boundary_value(geom):
    a = ScalarField.constant(geom, 2.0)
    b = ScalarField(geom, np.ones(geom.shape), 5.0)
    assert (a + b).boundary_value == 7.0
    assert (a - b).boundary_value == -3.0
    assert (b * 2).boundary_value == 10.0


def test_field_is_immutable(geom):
    f = ScalarField.constant(geom, 1.0)
    with pytest.raises(ValueError):
        f.values[0, 0] = 2.0


def test_field_rejects_bad_input(geom):
    with pytest.raises(ValueError):
        ScalarField(geom, np.zeros((3, 3)))
    vals = np.zeros(geom.shape)
    vals[1, 1] = np.nan
    with pytest.raises(ValueError):
        ScalarField(geom, vals)


def test_warp_displacement_matches_bilinear_oracle(geom, rng):
    m = 9
    T = Warp(3, rng.normal(size=(m, m)), rng.normal(size=(m, m)), geom)
    xs = rng.uniform(0, geom.Lx, 200)
    ys = rng.uniform(0, geom.Ly, 200)
    dx, dy = warp_displacement(T, xs, ys)
    hx, hy = geom.Lx / 8, geom.Ly / 8
    for x, y, a, b in zip(xs, ys, dx, dy):
        assert a == pytest.approx(bilinear_oracle(T.tx, 0, 0, hx, hy, 0, x, y), abs=1e-12)
        assert b == pytest.approx(bilinear_oracle(T.ty, 0, 0, hx, hy, 0, x, y), abs=1e-12)


def test_pixel_displacement_agrees_with_pointwise(geom, rng):
    T = Warp(2, rng.normal(size=(5, 5)), rng.normal(size=(5, 5)), geom)
    X, Y = geom.mesh()
    dx, dy = pixel_displacement(T)
    ex, ey = warp_displacement(T, X, Y)
    np.testing.assert_allclose(dx, ex, atol=1e-12)
    np.testing.assert_allclose(dy, ey, atol=1e-12)


def test_eval_warp_rejects_points_outside(geom):
    T = Warp.zero(2, geom)
    with pytest.raises(ValueError):
        eval_warp(T, -1.0, 5.0)
    assert eval_warp(T, 3.0, 4.0) == (3.0, 4.0)


def test_compose_with_zero_warp_is_exact(geom, rng):
    f = ScalarField(geom, rng.normal(size=geom.shape), 1.5)
    g = compose(f, Warp.zero(4, geom))
    assert np.array_equal(g.values, f.values)
    assert g.boundary_value == 1.5


def test_compose_translation_of_linear_field(geom):
    # bilinear interpolation is exact for linear fields
    f = ScalarField.from_function(geom, lambda X, Y: 2.0 * X - Y)
    T = sine_warp(geom, 3, 3.0, -2.0)
    X, Y = geom.mesh()
    dx, dy = pixel_displacement(T)
    g = compose(f, T)
    np.testing.assert_allclose(g.values, 2.0 * (X + dx) - (Y + dy), atol=1e-10)


def test_compose_outside_uses_boundary_value(geom):
    f = ScalarField(geom, np.ones(geom.shape), 7.0)
    m = 3
    T = Warp(1, np.full((m, m), 1000.0), np.zeros((m, m)), geom)
    assert np.all(compose(f, T).values == 7.0)


def cross_oracle(X, Y, r, c):
    pts = [(X[r, c], Y[r, c]), (X[r, c + 1], Y[r, c + 1]),
           (X[r + 1, c + 1], Y[r + 1, c + 1]), (X[r + 1, c], Y[r + 1, c])]
    out = []
    for i in range(4):
        p0, p1, p2 = pts[i - 1], pts[i], pts[(i + 1) % 4]
        out.append((p1[0] - p0[0]) * (p2[1] - p1[1]) - (p1[1] - p0[1]) * (p2[0] - p1[0]))
    return out


def test_convexity_check_matches_oracle(geom, rng):
    for _ in range(20):
        T = Warp(2, rng.normal(scale=12, size=(5, 5)), rng.normal(scale=12, size=(5, 5)), geom)
        X, Y = T.mapped_nodes()
        bad = {tuple(b) for b in nonconvex_quadrants(T)}
        for r in range(4):
            for c in range(4):
                convex = all(v > 0 for v in cross_oracle(X, Y, r, c))
                assert convex == ((r, c) not in bad)


def test_folded_warp_is_rejected(geom):
    T = Warp(1, np.array([[0, 0, 0], [0, 50.0, 0], [0, 0, 0]]), np.zeros((3, 3)), geom)
    assert not is_invertible(T)
    with pytest.raises(NonInvertibleWarpError) as exc:
        check_invertible(T)
    assert len(exc.value.quadrant) == 2
    with pytest.raises(NonInvertibleWarpError):
        invert_warp(T)


def random_warp(geom, seed, amp=5.0, level=4):
    return sample_invertible_warp(SmoothFieldSpec(amp, seed), SmoothFieldSpec(amp, seed + 10_000), level, geom)


def test_inverse_round_trip_at_nodes_and_pixels(desk_geom):
    T = random_warp(desk_geom, 3)
    inv = invert_warp(T)
    X, Y = T.node_coords()
    xi, yi = inv(*T.mapped_nodes())
    err = np.hypot(xi - X, yi - Y).max()
    assert err <= 1e-8 * desk_geom.diam
    # and the other composition order on pixel nodes
    Px, Py = desk_geom.mesh()
    qx, qy = inv(Px, Py)
    fx, fy = eval_warp(T, qx, qy)
    assert np.hypot(fx - Px, fy - Py).max() <= 1e-8 * desk_geom.diam


def test_inverse_newton_oracle(desk_geom, rng):
    # solve (I+T)(p) = q by plain Newton with a finite-difference Jacobian
    T = random_warp(desk_geom, 11)
    inv = invert_warp(T)
    for _ in range(20):
        q = rng.uniform(40, 210, 2)
        p = q.copy()
        for _ in range(50):
            f = np.array(eval_warp(T, *p)) - q
            h = 1e-6
            J = np.column_stack([(np.array(eval_warp(T, p[0] + h, p[1])) - q - f) / h,
                                 (np.array(eval_warp(T, p[0], p[1] + h)) - q - f) / h])
            p = p - np.linalg.solve(J, f)
        np.testing.assert_allclose(inv(*q), p, atol=1e-6)


def test_inverse_clamps_points_without_preimage(geom):
    # pull the right edge inward: points beyond it have no preimage
    m = 3
    tx = np.zeros((m, m))
    ty = np.zeros((m, m))
    tx[1, 2] = -10.0
    T = Warp(1, tx, ty, geom)
    xi, yi = invert_warp(T)(geom.Lx - 1.0, geom.Ly / 2)
    assert xi == pytest.approx(geom.Lx)
    assert 0 <= yi <= geom.Ly


def test_compose_inverse_matches_pointwise_oracle(desk_geom, rng):
    T = random_warp(desk_geom, 5)
    f = ScalarField(desk_geom, rng.normal(size=desk_geom.shape), 2.0)
    got = compose_inverse(f, T)
    inv = invert_warp(T)
    X, Y = desk_geom.mesh()
    for i, k in zip(rng.integers(0, 125, 50), rng.integers(0, 125, 50)):
        assert got.values[k, i] == eval_field(f, *inv(X[k, i], Y[k, i]))


def test_compose_inverse_undoes_compose_up_to_interpolation(desk_geom):
    T = random_warp(desk_geom, 5)
    f = ScalarField.from_function(desk_geom, lambda X, Y: 0.3 * X + 0.1 * Y)
    back = compose_inverse(compose(f, T), T)
    # resampling f o (I+T) on the pixel grid costs O(h^2 |D^2 (f o T)|)
    np.testing.assert_allclose(back.values, f.values, atol=0.05)
    assert np.abs(back.values - f.values).mean() < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_interp_then_restrict_is_identity(level, seed):
    g = GridGeometry(20, 20, 10.0, 10.0)
    r = np.random.default_rng(seed)
    m = 2 ** level + 1
    T = Warp(level, r.normal(size=(m, m)), r.normal(size=(m, m)), g)
    fine = interp_warp(T, level + 2)
    back = restrict_warp(fine, level)
    assert np.array_equal(back.tx, T.tx) and np.array_equal(back.ty, T.ty)
    # interpolation does not change the displacement field itself
    xs = r.uniform(0, 10, 50)
    ys = r.uniform(0, 10, 50)
    np.testing.assert_allclose(warp_displacement(fine, xs, ys), warp_displacement(T, xs, ys), atol=1e-12)


def test_level_checks(geom):
    T = Warp.zero(2, geom)
    with pytest.raises(ValueError):
        restrict_warp(T, 2)
    with pytest.raises(ValueError):
        interp_warp(T, 2)
    with pytest.raises(ValueError):
        Warp(2, np.zeros((3, 3)), np.zeros((3, 3)), geom)


def test_field_file_round_trip(tmp_path, geom, rng):
    f = ScalarField(geom, rng.normal(size=geom.shape), 300.0)
    p = tmp_path / "f.mkf"
    io.write_field(p, f)
    g = io.read_field(p)
    assert g.geometry == geom
    assert np.array_equal(g.values, f.values) and g.boundary_value == 300.0
    raw = p.read_bytes()
    assert raw.startswith(b"MKF1 41 33 ")
    assert len(raw.split(b"\n", 1)[1]) == 8 * geom.nx * geom.ny
    # row-major little-endian payload
    assert np.frombuffer(raw.split(b"\n", 1)[1][:8], "<f8")[0] == f.values[0, 0]


def test_warp_file_round_trip(tmp_path, desk_geom):
    T = random_warp(desk_geom, 8)
    p = tmp_path / "t.mkw"
    io.write_warp(p, T)
    U = io.read_warp(p, desk_geom)
    assert np.array_equal(U.tx, T.tx) and np.array_equal(U.ty, T.ty)
    assert p.read_bytes().startswith(b"MKW1 4\n")


def test_read_warp_checks_invertibility(tmp_path, geom):
    T = Warp(1, np.array([[0, 0, 0], [0, 50.0, 0], [0, 0, 0]]), np.zeros((3, 3)), geom)
    p = tmp_path / "bad.mkw"
    io.write_warp(p, T)
    with pytest.raises(NonInvertibleWarpError):
        io.read_warp(p, geom)
    assert io.read_warp(p, geom, check=False).tx[1, 1] == 50.0


def test_csv_export(tmp_path, geom):
    f = ScalarField.from_function(geom, lambda X, Y: X + 2 * Y)
    p = tmp_path / "f.csv"
    io.write_csv(p, f)
    table = np.loadtxt(p, delimiter=",", skiprows=1)
    assert table.shape == (geom.nx * geom.ny, 3)
    np.testing.assert_allclose(table[:, 2], table[:, 0] + 2 * table[:, 1])
