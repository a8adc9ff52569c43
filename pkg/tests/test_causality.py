import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from threewave.causality import (CAUSAL, CHRONOLOGICAL, NONE, TAU_TOL, TimelikePath, causal_relation,
                                 chronological, cut_time, earliest_obs, earliest_obs_many, is_optimizing,
                                 jacobi_conjugate_time, time_separation)
from threewave.geodesics import CoordinateBox, integrate_geodesic
from threewave.manifold import (Conformal, Constant, GaussianBump, Minkowski, PerturbedMinkowski,
                                TangentVector, project_null)

LENS_BOX = CoordinateBox(np.array([-3.0, -6.0, -6.0]), np.array([9.0, 6.0, 6.0]))
V_AXIS = TangentVector(np.array([-0.9, -2.95, 0.0]), np.array([1.0, 1.0, 0.0]))
RHO_AXIS = 4.1679  # cut time of V_AXIS in the lens, frozen from a bisection at s_tol = 1e-6


def test_tau_minkowski_examples():
    m = Minkowski(2)
    assert time_separation(m, (0, 0, 0), (2, 1, 0)) == pytest.approx(np.sqrt(3.0), abs=1e-12)
    assert time_separation(m, (0, 0, 0), (1, 1, 0)) == 0.0
    c4 = Conformal(Minkowski(2), Constant(4.0))
    assert time_separation(c4, (0, 0, 0), (2, 1, 0)) == pytest.approx(2 * np.sqrt(3.0), abs=1e-12)


def test_causal_relation_examples():
    m = Minkowski(2)
    assert causal_relation(m, (0, 0, 0), (2, 1, 0)).relation == CHRONOLOGICAL
    assert causal_relation(m, (0, 0, 0), (1, 1, 0)).relation == CAUSAL
    assert causal_relation(m, (0, 0, 0), (0, 1, 0)).relation == NONE


def test_cut_time_flat_and_constant_conformal():
    K = CoordinateBox.cube(3, 5.0)
    v = TangentVector(np.zeros(3), np.array([1.0, 0.6, 0.8]))
    for m in (Minkowski(2), Conformal(Minkowski(2), Constant(4.0))):
        c = cut_time(m, v, K)
        assert c.no_cut_within_box
        assert c.rho == pytest.approx(c.exit_time)
        assert is_optimizing(m, v, 1.0)


def test_lens_cut_before_conjugate_point():
    m = PerturbedMinkowski(2, 0.15, (0, 0, 0), (100, 1, 1))
    c = cut_time(m, V_AXIS, LENS_BOX)
    conj = jacobi_conjugate_time(m, V_AXIS, 8.0)
    assert not c.no_cut_within_box
    assert c.rho == pytest.approx(RHO_AXIS, abs=1e-4)
    assert c.rho <= conj + 1e-6
    assert is_optimizing(m, V_AXIS, c.rho - 0.05)
    assert not is_optimizing(m, V_AXIS, c.rho + 0.05)
    assert is_optimizing(m, V_AXIS, 0.0)
    # the reversed geodesic from the cut point has its cut back at the start
    st = integrate_geodesic(m, V_AXIS, (0, c.rho)).state(c.rho)
    back = cut_time(m, TangentVector(st[:3], -st[3:]), LENS_BOX)
    assert abs(back.rho - c.rho) <= 2 * 1e-6


def test_cut_time_lower_semicontinuous():
    m = PerturbedMinkowski(2, 0.15, (0, 0, 0), (100, 1, 1))
    eps = np.array([0.01, 0.005, 0.0025])
    rho = np.array([cut_time(m, TangentVector(V_AXIS.x, np.array([1.0, np.cos(e), np.sin(e)])),
                             LENS_BOX).rho for e in eps])
    # extrapolate the sampled sequence to the limit vector
    lim = np.polyfit(eps, rho, 1)[1]
    assert lim >= RHO_AXIS - 2e-4
    assert np.all(rho >= RHO_AXIS - 0.5 * eps - 2e-6)


def test_earliest_obs_examples():
    m = Minkowski(2)
    assert earliest_obs(m, TimelikePath.vertical([0.5, 0.0]), np.zeros(3)) == pytest.approx(0.5, abs=1e-8)
    assert earliest_obs(m, TimelikePath.vertical([2.0, 0.0]), np.zeros(3)) == 1.0
    c4 = Conformal(Minkowski(2), Constant(4.0))
    assert earliest_obs(c4, TimelikePath.vertical([0.5, 0.0]), np.zeros(3)) == pytest.approx(0.5, abs=1e-8)
    mu = TimelikePath.vertical([0.5, 0.0])
    assert earliest_obs(m, mu, np.zeros(3), "past") == pytest.approx(-0.5, abs=1e-8)


BUMP = Conformal(Minkowski(2), GaussianBump((1.0, 0.0, 0.0), 0.8, 0.6))


@settings(max_examples=6)
@given(a=st.tuples(st.floats(0.3, 0.8), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3)),
       b=st.tuples(st.floats(0.3, 0.8), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3)))
def test_reverse_triangle_inequality(a, b):
    x = np.zeros(3)
    y = x + np.array(a) * np.array([1.0, 0.5, 0.5]) + np.array([0.5, 0, 0])
    z = y + np.array(b) * np.array([1.0, 0.5, 0.5]) + np.array([0.5, 0, 0])
    txy, tyz, txz = (time_separation(BUMP, p, q) for p, q in ((x, y), (y, z), (x, z)))
    assert txy > 0 and tyz > 0
    assert txz >= txy + tyz - 5 * TAU_TOL


@settings(max_examples=10)
@given(w1=st.floats(-np.pi, np.pi), w2=st.floats(-np.pi, np.pi),
       s1=st.floats(0.3, 1.5), s2=st.floats(0.3, 1.5))
def test_broken_null_path_is_chronological(w1, w2, s1, s2):
    # a causal connection that is two null segments with a corner
    m = PerturbedMinkowski(2, 0.15, (0, 0, 0), (100, 1, 1))
    if abs(np.angle(np.exp(1j * (w1 - w2)))) < 0.2:
        return
    x = np.array([-2.0, -1.0, 0.3])
    xi1 = project_null(m, x, [1.0, np.cos(w1), np.sin(w1)])
    g1 = integrate_geodesic(m, TangentVector(x, xi1), (0, s1))
    y = g1.point(s1)
    xi2 = project_null(m, y, [1.0, np.cos(w2), np.sin(w2)])
    g2 = integrate_geodesic(m, TangentVector(y, xi2), (0, s2))
    z = g2.point(s2)
    assert chronological(m, x[None], z[None])[0][0]


@pytest.mark.parametrize("w, z", [(0.3832410385126672, -0.34026108536292143),
                                  (0.5876617211273717, -0.3863279800785966)])
def test_earliest_arrival_monotone_along_rays(w, z):
    # rays whose arrival cells sit near the lens caustic, where coarse fan interpolation misleads
    m = PerturbedMinkowski(2, 0.15, (0, 0, 0), (100, 1, 1))
    mu = TimelikePath(lambda s: np.stack([5.6 + 0.95 * s, 3.2 + 0 * s, 0.9 + 0 * s], -1))
    x = np.array([-0.9, -2.95, z])
    v = TangentVector(x, project_null(m, x, [1.0, np.cos(w), np.sin(w)]))
    s = np.linspace(0.0, 2.0, 5)
    f = earliest_obs_many(m, mu, integrate_geodesic(m, v, (0, 2)).point(s))
    assert np.all(np.diff(f) >= -1e-8)
