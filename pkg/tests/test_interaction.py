import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from threewave.beams import chi
from threewave.interaction import (CombinedPhase, InteractionConfig, complete_span_directions, eval_D_quasi,
                                   eval_D_semi, extrapolate, gaussian_constant, prepare_interaction,
                                   span_coefficients, stationary_phase_limit)
from threewave.manifold import DomainError, Minkowski, QuasiMetricFamily, TangentVector, constant_h

XI = [np.array(v, float) for v in ((1, 0, -1), (1, 1, 0), (1, -1, 0), (1, 0, 1))]
LAMS = (40.0, 60.0, 90.0, 135.0)


def four_vectors(shift=0.0):
    """Four null geodesics meeting at the origin (shift moves the last one off it)."""
    return [TangentVector(np.array([3.0, 0.0, -3.0]), XI[0]),
            TangentVector(np.array([-2.0, -2.0, 0.0]), XI[1]),
            TangentVector(np.array([-2.0, 2.0, 0.0]), XI[2]),
            TangentVector(np.array([-2.0, 0.0, -2.0 + shift]), XI[3])]


@pytest.fixture(scope="module")
def prep():
    return prepare_interaction(InteractionConfig(Minkowski(2), four_vectors()))


def test_span_coefficients_examples():
    k = span_coefficients(XI)
    assert np.allclose(k / k[0], [1, -1, -1, 1])
    assert np.linalg.norm(sum(kj * x for kj, x in zip(k, XI))) < 1e-10 * max(np.linalg.norm(x) for x in XI)
    assert span_coefficients(XI[1:]) == "independent"
    with pytest.raises(DomainError):
        span_coefficients([2 * XI[1], XI[1], XI[2], XI[3]])
    with pytest.raises(DomainError):
        span_coefficients(XI, metric=Minkowski(2), x=np.zeros(3)[:0])
    with pytest.raises(DomainError):
        span_coefficients([np.array([1.0, 2.0, 0.0])] + XI[1:], metric=Minkowski(2), x=np.zeros(3))


@settings(max_examples=20)
@given(a=st.floats(0.3, 2.8), b=st.floats(-2.8, -0.3), c=st.floats(0.2, 1.2))
def test_dependent_null_quadruples_have_nonzero_coefficients(a, b, c):
    def nv(t, p=0.0):
        return np.array([1.0, np.cos(t) * np.cos(p), np.sin(t) * np.cos(p)])
    assume(abs(c - a) > 0.05)
    x1, x2, x3 = nv(0.0), nv(a), nv(b)
    # in 1+2 dimensions any null fourth vector is in the span of three independent ones
    x0 = nv(c)
    k = span_coefficients([x0, x1, x2, x3])
    assert not isinstance(k, str)
    assert np.all(np.abs(k) > 1e-8)
    assert np.linalg.norm(k[0] * x0 + k[1] * x1 + k[2] * x2 + k[3] * x3) < 1e-10


def test_complete_span_directions_round_trip():
    sc = complete_span_directions(XI[1], XI[0], 0.5)
    eta = sum(c * x for c, x in zip(sc.coefficients, (XI[1], sc.xi2, sc.xi3)))
    assert np.linalg.norm(eta - XI[0]) < 1e-9
    mink = np.diag([-1.0, 1.0, 1.0])
    for x in (sc.xi2, sc.xi3):
        assert abs(x @ mink @ x) < 1e-12 and x[0] > 0
    assert max(sc.angles) <= 0.5
    k = span_coefficients([XI[0], XI[1], sc.xi2, sc.xi3])
    assert not isinstance(k, str)


def test_complete_span_directions_1p3():
    m3 = Minkowski(3)
    eta = np.array([1.0, 0.02, -1.0, 0.03])
    sc = complete_span_directions(np.array([1.0, 1.0, 0.0, 0.0]), eta, 0.5, metric=m3,
                                  xi0=np.array([1.0, 0.0, -1.0, 0.0]))
    assert sc.residual < 1e-9
    assert max(sc.angles) <= 0.5


def test_complete_span_rejects_spacelike_and_accepts_xi1():
    with pytest.raises(DomainError):
        complete_span_directions(XI[1], np.array([0.2, 1.0, 0.0]), 0.5)
    sc = complete_span_directions(XI[1], XI[1], 0.5)
    assert sc.residual < 1e-9


def test_combined_phase_at_the_interaction_point(prep):
    ph = prep.phase
    assert abs(ph.value) < 1e-12
    assert ph.grad_norm < 1e-8
    assert ph.imag_coercivity > 0
    assert ph.growth_exponent() == pytest.approx(2.0, abs=0.2)
    # three beams with generic weights have no critical point
    three = CombinedPhase(prep.beams[1:], prep.y)
    assert three.grad_norm > 0.1


def test_gaussian_constant_closed_form():
    assert gaussian_constant(2j * np.eye(3)) == pytest.approx(np.pi ** 1.5, rel=1e-12)
    with pytest.raises(DomainError):
        gaussian_constant(-2j * np.eye(3))


def test_extrapolation_recovers_a_known_limit():
    lams = np.array(LAMS)
    L, err = extrapolate(lams, 2.0 + 0.7 * lams ** -0.5 - 0.3 / lams)
    assert L == pytest.approx(2.0, abs=1e-12)
    # the error bar compares against the fit without the last correction, so it is conservative
    assert err >= abs(L - 2.0)


def test_stationary_phase_gaussian_limit():
    S = lambda X: 1j * np.sum(X ** 2, -1)
    F = lambda X: chi(np.linalg.norm(X, axis=-1) / 2)
    r = stationary_phase_limit(S, F, np.zeros(3))
    assert r.closed_form == pytest.approx(np.pi ** 1.5, rel=1e-8)
    assert abs(r.values[-1] / np.pi ** 1.5 - 1) < 0.01
    assert abs(r.limit / np.pi ** 1.5 - 1) < 0.01


def test_stationary_phase_vanishing_amplitude_rate():
    S = lambda X: 1j * np.sum(X ** 2, -1)
    F = lambda X: chi(np.linalg.norm(X, axis=-1) / 2) * X[..., 0]
    r = stationary_phase_limit(S, F, np.zeros(3), grid={"R": 1.0})
    # F is odd, so the limit is 0
    assert np.max(np.abs(r.values)) < 1e-8
    F = lambda X: chi(np.linalg.norm(X, axis=-1) / 2) * np.linalg.norm(X, axis=-1)
    r = stationary_phase_limit(S, F, np.zeros(3))
    slope = np.polyfit(np.log(r.lams), np.log(np.abs(r.values)), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.05)


def test_non_stationary_phase_decays():
    S = lambda X: 1j * np.sum(X ** 2, -1) + 0.5 * X[..., 0]
    F = lambda X: chi(np.linalg.norm(X, axis=-1) / 2)
    r = stationary_phase_limit(S, F, np.zeros(3), grid={"R": 1.0})
    assert np.all(np.diff(np.log(np.abs(r.values))) < -1.0)
    with pytest.raises(DomainError):
        stationary_phase_limit(lambda X: -1j * np.sum(X ** 2, -1), F, np.zeros(3))


def test_D_semi_reduction_and_prediction(prep):
    r = eval_D_semi(prep, LAMS)
    assert abs(r.full[-1] - r.reduced[-1]) < 3 * max(r.full_error, 1e-12)
    assert r.full_limit == pytest.approx(r.predicted, rel=0.05)


def test_D_semi_kappa_flip_and_vanishing_probe():
    m = Minkowski(2)
    p = prepare_interaction(InteractionConfig(m, four_vectors(), kappas=[1.0, -1.0, -1.0, 1.0]))
    q = prepare_interaction(InteractionConfig(m, four_vectors(), kappas=[-1.0, 1.0, 1.0, -1.0]))
    a, b = eval_D_semi(p, LAMS[:2]), eval_D_semi(q, LAMS[:2])
    assert np.allclose(a.full, b.full, rtol=1e-10, atol=1e-14)
    z = prepare_interaction(InteractionConfig(m, four_vectors(), u_f=0.0, m=4))
    assert np.all(eval_D_semi(z, LAMS[:2]).full == 0.0)


def test_D_semi_without_intersection_is_small(prep):
    m = Minkowski(2)
    off = prepare_interaction(InteractionConfig(m, four_vectors(0.5), kappas=list(prep.kappas)))
    assert off.spread > 0.1
    r = eval_D_semi(off, LAMS)
    ref = eval_D_semi(prep, LAMS[-1:])
    assert abs(r.full[-1]) < 1e-3 * abs(ref.full[0])
    assert np.all(np.diff(np.abs(r.full)) < 0)


def test_time_windows_remove_the_interaction():
    # the observation window closes before the geodesics meet
    m = Minkowski(2)
    V = four_vectors()
    V[0] = TangentVector(np.array([-0.6, 0.0, 0.6]), XI[0])
    p = prepare_interaction(InteractionConfig(m, V, delta=0.5))
    assert np.all(eval_D_semi(p, LAMS[:1]).full == 0.0)


def test_interaction_config_validation():
    m = Minkowski(2)
    with pytest.raises(DomainError):
        InteractionConfig(m, four_vectors()[:3])
    with pytest.raises(DomainError):
        InteractionConfig(m, four_vectors(), kappas=[1, 0, 1, 1])
    with pytest.raises(DomainError):
        InteractionConfig(m, four_vectors(), m=2)
    V = four_vectors()
    V[2] = TangentVector(V[1].x + 0.5 * V[1].xi, 2.0 * V[1].xi)
    with pytest.raises(DomainError):
        InteractionConfig(m, V)


def test_D_quasi_groups(prep):
    m = Minkowski(2)
    pos = eval_D_quasi(prep, QuasiMetricFamily(m, constant_h(np.eye(3))))
    assert pos.limits[2] > 0 and pos.predicted_group3 > 0
    assert pos.limits[2] == pytest.approx(pos.predicted_group3, rel=0.05)
    assert np.all(np.diff(np.abs(pos.groups[1])) < 0)
    assert abs(pos.limits[1]) < 1e-3 * pos.limits[2]
    deg = eval_D_quasi(prep, QuasiMetricFamily(m, constant_h(np.diag([-1.0, 1.0, 1.0]))))
    assert deg.h_null == 0.0
    assert abs(deg.combined_limit) < 1e-3 * abs(pos.combined_limit)
