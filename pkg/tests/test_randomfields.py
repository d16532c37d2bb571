import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphenkf.field import GridGeometry, eval_warp, is_invertible, invert_warp
from morphenkf.randomfields import (SmoothFieldSpec, WarpSamplingError, mode_weights, sample_field,
                                    sample_invertible_warp, sample_warp, series, series_variance)

FULL_GEOM = GridGeometry(250, 250, 500.0, 500.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), d=st.integers(1, 12),
       amp=st.floats(0.0, 1e3), nx=st.integers(2, 40), ny=st.integers(2, 40))
def test_edges_are_zero(seed, d, amp, nx, ny):
    f = sample_field(SmoothFieldSpec(amp, seed, d), GridGeometry(nx, ny, 10.0, 7.0)).values
    for edge in (f[0], f[-1], f[:, 0], f[:, -1]):
        assert np.all(edge == 0.0)


def test_fixed_seed_is_deterministic(geom):
    a = sample_field(SmoothFieldSpec(50.0, 17), geom)
    b = sample_field(SmoothFieldSpec(50.0, 17), geom)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, sample_field(SmoothFieldSpec(50.0, 18), geom).values)


def test_single_mode_closed_form():
    g = GridGeometry(21, 21, 40.0, 40.0)
    f = sample_field(SmoothFieldSpec(3.0, 5, d=1), g).values
    d11 = np.random.default_rng(5).standard_normal((1, 1))[0, 0]
    s = np.linspace(0.0, 1.0, 21)
    expect = 3.0 * (1 + np.sqrt(2)) ** -2 * d11 * np.outer(np.sin(np.pi * s), np.sin(np.pi * s))
    np.testing.assert_allclose(f, expect, rtol=1e-12, atol=1e-13)
    assert f[10, 10] == pytest.approx(3.0 * (1 + np.sqrt(2)) ** -2 * d11, rel=1e-12)


def test_mode_weights():
    lam = mode_weights(3)
    assert lam[0, 0] == pytest.approx((1 + np.sqrt(2)) ** -2)
    assert lam[1, 2] == lam[2, 1] == pytest.approx((1 + np.sqrt(13)) ** -2)


def test_series_pointwise_oracle(rng):
    C = rng.normal(size=(4, 4))
    xs, ys = rng.uniform(size=5), rng.uniform(size=3)
    got = series(C, xs, ys, 2.0)
    for a, y in enumerate(ys):
        for b, x in enumerate(xs):
            ref = sum(2.0 * (1 + np.hypot(j, l)) ** -2 * C[j - 1, l - 1] * np.sin(j * np.pi * x) * np.sin(l * np.pi * y)
                      for j in range(1, 5) for l in range(1, 5))
            assert got[a, b] == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_center_std_matches_series_variance():
    # center of a 3x3 node grid is (0.5, 0.5)
    g = GridGeometry(3, 3, 1.0, 1.0)
    vals = np.array([sample_field(SmoothFieldSpec(5.0, s), g).values[1, 1] for s in range(10_000)])
    assert vals.std() == pytest.approx(np.sqrt(series_variance(10, 0.5, 0.5, 5.0)), rel=0.05)


def test_zero_amplitude_warp_first_try():
    T = sample_invertible_warp(SmoothFieldSpec(0.0, 1), SmoothFieldSpec(0.0, 2), 4, FULL_GEOM, max_tries=1)
    assert np.all(T.tx == 0.0) and np.all(T.ty == 0.0)


def test_five_metre_warps_always_accepted():
    # every one of 200 draws is invertible on the default geometry
    acc = [is_invertible(sample_warp(SmoothFieldSpec(5.0, s), SmoothFieldSpec(5.0, s + 10 ** 6), 4, FULL_GEOM))
           for s in range(200)]
    assert np.mean(acc) == 1.0
    T = sample_invertible_warp(SmoothFieldSpec(5.0, 3), SmoothFieldSpec(5.0, 4), 4, FULL_GEOM)
    X, Y = FULL_GEOM.mesh()
    xi, yi = invert_warp(T)(X, Y)
    fx, fy = eval_warp(T, xi, yi)
    assert np.hypot(fx - X, fy - Y).max() <= 1e-8 * np.hypot(500.0, 500.0)


def test_warp_boundary_nodes_fixed():
    T = sample_invertible_warp(SmoothFieldSpec(5.0, 3), SmoothFieldSpec(5.0, 4), 4, FULL_GEOM)
    for a in (T.tx, T.ty):
        assert np.all(a[0] == 0) and np.all(a[-1] == 0) and np.all(a[:, 0] == 0) and np.all(a[:, -1] == 0)


def test_huge_warps_exhaust_tries():
    acc = [is_invertible(sample_warp(SmoothFieldSpec(1e3, s), SmoothFieldSpec(1e3, s + 10 ** 6), 4, FULL_GEOM))
           for s in range(200)]
    assert np.mean(acc) < 0.01
    with pytest.raises(WarpSamplingError, match="acceptance rate") as e:
        sample_invertible_warp(SmoothFieldSpec(1e3, 1), SmoothFieldSpec(1e3, 2), 4, FULL_GEOM, max_tries=20)
    assert e.value.acceptance_rate < 0.01


def test_redraws_use_fresh_streams():
    a = sample_warp(SmoothFieldSpec(5.0, 1), SmoothFieldSpec(5.0, 2), 3, FULL_GEOM, attempt=0)
    b = sample_warp(SmoothFieldSpec(5.0, 1), SmoothFieldSpec(5.0, 2), 3, FULL_GEOM, attempt=1)
    assert not np.array_equal(a.tx, b.tx)


def test_spec_validation():
    with pytest.raises(ValueError):
        SmoothFieldSpec(1.0, 0, d=0)
    with pytest.raises(ValueError):
        SmoothFieldSpec(-1.0, 0)
    with pytest.raises(ValueError):
        sample_invertible_warp(SmoothFieldSpec(1.0, 0), SmoothFieldSpec(1.0, 1), 3, FULL_GEOM, max_tries=0)
