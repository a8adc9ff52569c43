import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from threewave.beams import (BeamSource, beam_residual, build_beam, build_source, check_initial_data, chi,
                             matched_conformal_beam, source_norm_exponent, truncated_residual_exponent,
                             zeta_minus, zeta_plus)
from threewave.manifold import Conformal, Constant, DomainError, GaussianBump, Minkowski, TangentVector

V0 = TangentVector(np.zeros(3), np.array([1.0, 1.0, 0.0]))


@pytest.fixture(scope="module")
def flat_beam():
    return build_beam(Minkowski(2), V0, 1.0, 40.0, delta=4.0, s_range=(0.0, 3.0))


@pytest.fixture(scope="module")
def lens_beam(lens):
    v = TangentVector(np.array([0.0, -2.0, 0.0]), np.array([1.0, 1.0, 0.0]))
    return build_beam(lens, v, 1.0, 40.0, delta=0.2, s_range=(0.0, 3.0))


def test_flat_riccati_closed_form(flat_beam):
    # with D = 0 and C = diag(0, 2): Y' = C Z, Z' = 0, so Z = iI and Y = I + s C i
    r = flat_beam.riccati
    s = np.linspace(0.0, 3.0, 31)
    Y = np.array([np.diag([1.0, 1.0 + 2j * t]) for t in s])
    assert np.max(np.abs(r.Y(s) - Y)) < 1e-10
    assert np.max(np.abs(r.Z(s) - 1j * np.eye(2))) < 1e-10
    assert r.conservation_drift() < 1e-8


def test_flat_principal_amplitude(flat_beam):
    a = flat_beam.riccati.a00(np.array([1.0]))[0]
    assert abs(a) == pytest.approx(5 ** -0.25, abs=1e-10)
    assert a == pytest.approx((1 + 2j) ** -0.5, abs=1e-10)
    # the branch is continuous: no sign jumps along the grid
    s = np.linspace(0.0, 3.0, 301)
    a = flat_beam.riccati.a00(s)
    assert np.max(np.abs(np.diff(a))) < 0.02


def test_rejects_initial_data_outside_admissible_set():
    with pytest.raises(DomainError):
        check_initial_data(np.eye(2), -1j * np.eye(2))
    with pytest.raises(DomainError):
        check_initial_data(np.eye(2), np.array([[1j, 1.0], [0.0, 1j]]))


def test_lens_riccati_invariants(lens_beam):
    r = lens_beam.riccati
    assert r.conservation_drift() < 1e-8
    assert r.symmetry_error() < 1e-8
    assert r.min_imag_eig() > 0
    assert r.min_abs_det_Y() > 0


def test_beam_on_gamma_equals_amplitude(flat_beam, lens_beam):
    for b in (flat_beam, lens_beam):
        s = np.linspace(0.2, 2.8, 9)
        U = b(b.chart.gamma(s))
        assert np.max(np.abs(U - b.riccati.a00(s))) < 1e-9


def test_cutoff_and_gaussian_bound(lens_beam):
    b = lens_beam
    assert chi(np.array([0.0, 0.25, 0.5, 0.7])).tolist() == [1.0, 1.0, 0.0, 0.0]
    s = np.full(4, 1.0)
    y = np.array([[0.5, 0.0], [0.0, 0.5], [0.3, 0.4], [0.1, 0.0]]) * b.delta * np.array([[1.0], [1.0], [1.0], [6.0]])
    assert np.all(b.eval_sy(s, y) == 0)
    rng = np.random.default_rng(1)
    s = rng.uniform(0.0, 3.0, 200)
    y = rng.normal(0.0, 0.03, (200, 2))
    C = b.imag_lower_bound()
    bound = np.abs(b.riccati.a00(s)) * np.exp(-b.lam * abs(b.kappa) * C * np.sum(y ** 2, axis=1))
    assert np.all(np.abs(b.eval_sy(s, y)) <= bound * (1 + 1e-10))


def test_phase_gradient_is_the_tangent(flat_beam, lens_beam):
    for b in (flat_beam, lens_beam):
        assert b.phase_gradient_error(np.array([0.5, 1.5, 2.5])) < 1e-6


def test_negative_kappa_is_conjugate(lens):
    v = TangentVector(np.array([0.0, -2.0, 0.0]), np.array([1.0, 1.0, 0.0]))
    bp = build_beam(lens, v, 1.5, 40.0, delta=0.2, s_range=(0.0, 3.0))
    bm = build_beam(lens, v, -1.5, 40.0, delta=0.2, s_range=(0.0, 3.0))
    x = bp.chart.forward(np.linspace(0.5, 2.5, 5), np.full((5, 2), 0.02))
    assert np.allclose(bm(x), np.conj(bp(x)), atol=1e-14)


def test_field_gradient_matches_differences(lens_beam):
    b = lens_beam
    rng = np.random.default_rng(0)
    x = b.chart.forward(rng.uniform(0.5, 2.5, 20), rng.normal(0, 0.02, (20, 2)))
    U, dU = b.field_and_gradient(x)
    h = 1e-6
    fd = np.stack([(b(x + h * e) - b(x - h * e)) / (2 * h) for e in np.eye(3)], -1)
    assert np.max(np.abs(U - b(x))) < 1e-14
    assert np.max(np.abs(dU - fd)) / np.max(np.abs(fd)) < 1e-5


def test_residual_order_count():
    # lam^2 <dphi, dphi> = O(|y|^3), lam-terms O(|y|), width lam^{-1/2}, n = 2 transverse variables
    assert truncated_residual_exponent(2) == pytest.approx(0.5 - 0.5)
    assert truncated_residual_exponent(1) == pytest.approx(0.25)
    assert source_norm_exponent(2) == pytest.approx(0.5)


def test_zero_amplitude_beam_has_zero_residual():
    b = build_beam(Minkowski(2), V0, 1.0, 40.0, delta=4.0, s_range=(0.0, 1.0), scale=0.0)
    rep = beam_residual(Minkowski(2), b, [40.0, 60.0], s_range=(0.3, 0.5))
    assert np.all(rep.norms == 0.0)


def test_zeta_windows():
    q0, d = 1.0, 0.4
    assert zeta_minus(np.array([0.6, 0.5]), q0, d).tolist() == [0.0, 0.0]
    assert zeta_minus(np.array([0.8, 1.2]), q0, d).tolist() == [1.0, 1.0]
    assert zeta_plus(np.array([0.7, 0.8]), q0, d).tolist() == [1.0, 1.0]
    assert zeta_plus(np.array([1.0, 1.3]), q0, d).tolist() == [0.0, 0.0]


def test_source_support_and_window():
    b = build_beam(Minkowski(2), V0, 1.0, 40.0, delta=4.0, s_range=(-1.0, 1.0))
    src = build_source(b, "forward", delta=0.2)
    assert src.window() == (-0.2, 0.0)
    x = np.array([[0.05, 0.05, 0.0], [-0.3, -0.3, 0.0], [0.5, 0.5, 0.0]])
    assert np.all(src.evaluate(x) == 0.0)
    inside = src.evaluate(np.array([[-0.15, -0.15, 0.0]]))
    assert np.isrealobj(inside) and abs(inside[0]) > 1.0
    with pytest.raises(DomainError):
        build_source(b, "forward", delta=0.2, region=(0.0, 1.0))
    with pytest.raises(DomainError):
        BeamSource(b, "sideways")


def test_source_norm_scaling():
    b = build_beam(Minkowski(2), V0, 1.0, 40.0, delta=4.0, s_range=(-1.0, 1.0))
    src = build_source(b, "forward", delta=0.2)
    lams = np.array([40.0, 80.0, 160.0])
    norms = [src.l2_norm(l) for l in lams]
    slope = np.polyfit(np.log(lams), np.log(norms), 1)[0]
    assert slope == pytest.approx(source_norm_exponent(2), abs=0.3)


def test_conformal_amplitude_law_constant():
    hat = Minkowski(2)
    bh = build_beam(hat, V0, 1.0, 40.0, delta=1.0, s_range=(-0.5, 2.0))
    c = Constant(4.0)
    bg = matched_conformal_beam(bh, Conformal(hat, c), c, (-2.0, 10.0))
    sh = np.linspace(0.0, 1.5, 7)
    sg, yg = bg.chart.inverse(bh.chart.gamma(sh))
    assert np.max(np.abs(yg)) < 1e-12
    ratio = bg.riccati.a00(sg) / bh.riccati.a00(sh)
    assert np.max(np.abs(ratio / 4.0 ** -0.25 - 1)) < 1e-4


@settings(max_examples=6)
@given(x0=st.floats(0.5, 1.5), amp=st.floats(0.2, 0.8))
def test_conformal_amplitude_law_bump(x0, amp):
    hat = Minkowski(2)
    bh = build_beam(hat, V0, 1.0, 40.0, delta=1.0, s_range=(-0.5, 2.0))
    c = GaussianBump(np.array([x0, 1.0, 0.2]), 0.8, amp)
    bg = matched_conformal_beam(bh, Conformal(hat, c), c, (-0.5 * c.value(np.zeros(3)), 2.5 * 1.8))
    sh = np.linspace(0.0, 1.5, 7)
    X = bh.chart.gamma(sh)
    sg, _ = bg.chart.inverse(X)
    law = c.value(X) ** -0.25 * bh.riccati.a00(sh)
    assert np.max(np.abs(bg.riccati.a00(sg) / law - 1)) < 1e-4
