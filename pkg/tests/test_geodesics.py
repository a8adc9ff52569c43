import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from threewave.geodesics import CoordinateBox, exit_time, integrate_geodesic, reverse
from threewave.manifold import (Conformal, Constant, DomainError, Minkowski, PerturbedMinkowski,
                                TangentVector)

V0 = TangentVector(np.zeros(3), np.array([1.0, 1.0, 0.0]))


def test_minkowski_straight_line():
    geo = integrate_geodesic(Minkowski(2), V0, (0, 2))
    assert np.allclose(geo.point(2.0), [2, 2, 0], atol=1e-14)


def test_conformal_constant_same_point_set():
    geo = integrate_geodesic(Conformal(Minkowski(2), Constant(4.0)), V0, (0, 2))
    P = geo.point(np.linspace(0, 2, 41))
    # distance of each point to the line t = x, y = 0
    assert np.max(np.abs(P[:, 0] - P[:, 1])) < 1e-8
    assert np.max(np.abs(P[:, 2])) < 1e-8


def test_spacelike_rejected():
    with pytest.raises(DomainError):
        integrate_geodesic(Minkowski(2), TangentVector(np.zeros(3), np.array([0.0, 1, 0])), (0, 1))


def test_weak_bump_matches_linearized_deviation():
    # bump away from the base point, so the initial vector is unaffected;
    # first-order deviation dx(s) = -int_0^s (s - r) Gamma(x0(r))[xi, xi] dr
    a = 1e-3
    m = PerturbedMinkowski(2, a, (1.0, 1.0, 0.3), (0.8, 0.8, 0.8))
    geo = integrate_geodesic(m, V0, (0, 2))
    dev = geo.point(2.0) - np.array([2.0, 2.0, 0.0])
    xi = V0.xi

    def acc(r, i):
        return -np.einsum("jk,j,k->", m.christoffel(r * xi)[i], xi, xi)

    lin = np.array([quad(lambda r: (2.0 - r) * acc(r, i), 0, 2, points=[0.4, 1.6], limit=200)[0]
                    for i in range(3)])
    assert 1e-5 < np.linalg.norm(dev) < 1e-2
    assert np.linalg.norm(dev - lin) < 0.05 * np.linalg.norm(lin)


def test_exit_time_examples():
    geo = integrate_geodesic(Minkowski(2), V0, (0, 1))
    assert exit_time(geo, CoordinateBox.cube(3, 3.0)) == pytest.approx(3.0, abs=1e-14)
    K = CoordinateBox(np.array([-1, -0.5, -1.0]), np.array([1, 0.5, 1.0]))
    assert exit_time(geo, K) == pytest.approx(0.5, abs=1e-14)


def test_exit_time_perturbed():
    m = PerturbedMinkowski(2, 1e-3, (1.0, 1.0, 0.3), (0.8, 0.8, 0.8))
    geo = integrate_geodesic(m, V0, (0, 1))
    K = CoordinateBox.cube(3, 3.0)
    R = exit_time(geo, K)
    assert abs(R - 3.0) < 1e-2
    x = geo.point(R) if R <= geo.s_max else integrate_geodesic(m, V0, (0, R)).point(R)
    assert np.max(np.abs(x)) == pytest.approx(3.0, abs=1e-9)


@given(y0=st.floats(-0.8, 0.8), w=st.floats(-0.5, 0.5), s_star=st.floats(1.0, 4.0))
def test_reversal_retraces(y0, w, s_star):
    m = PerturbedMinkowski(2, 0.15, (0, 0, 0), (100, 1, 1))
    v = TangentVector(np.array([0.0, -2.0, y0]), np.array([1.0, np.cos(w), np.sin(w)]))
    geo = integrate_geodesic(m, v, (0, s_star))
    back = reverse(geo, s_star)
    s = np.linspace(0, s_star, 21)
    err = np.max(np.abs(back.point(s) - geo.point(s_star - s)))
    assert err < 10 * 1e-10 * 10  # 10 tol_geo on coordinates of size ~10


def test_tolerance_order():
    # adaptive DOP853: steps scale as tol^(1/9), global error as tol^(8/9)
    m = PerturbedMinkowski(2, 0.15, (0, 0, 0), (100, 1, 1))
    v = TangentVector(np.array([0.0, -2.0, 0.3]), np.array([1.0, 1.0, 0.0]))
    ref = integrate_geodesic(m, v, (0, 4), tol_geo=1e-13, atol=1e-15).point(4.0)
    tols = 10.0 ** -np.arange(3, 10.5, 0.5)
    errs = [np.linalg.norm(integrate_geodesic(m, v, (0, 4), tol_geo=t, atol=1e-2 * t).point(4.0) - ref)
            for t in tols]
    slope = np.polyfit(np.log(tols), np.log(errs), 1)[0]
    assert abs(slope - 8 / 9) < 0.2 * 8 / 9


def test_exit_time_upper_semicontinuous():
    m = PerturbedMinkowski(2, 0.15, (0, 0, 0), (100, 1, 1))
    K = CoordinateBox.cube(3, 3.0)
    base = np.array([0.0, -2.0, 0.2])

    def R(w):
        v = TangentVector(base, np.array([1.0, np.cos(w), np.sin(w)]))
        return exit_time(integrate_geodesic(m, v, (0, 1)), K)

    lim = R(0.1)
    eps = 0.05 / 2.0 ** np.arange(6, 12)
    dev = np.array([R(0.1 + e) for e in eps]) - lim
    # the excess must vanish with the distance to the limit vector
    intercept = np.polyfit(eps, dev, 1)[1]
    assert intercept <= 10 * 1e-10
    assert np.all(np.abs(dev) <= np.abs(dev[0]) * eps / eps[0] * 1.1 + 1e-9)


def test_blowup_outside_parameter_range():
    geo = integrate_geodesic(Minkowski(2), V0, (0, 1))
    with pytest.raises(DomainError):
        geo.point(2.0)
