import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from threewave.causality import TimelikePath
from threewave.manifold import DomainError, Minkowski, TangentVector
from threewave.relation import (MEMBER, NONMEMBER, UNKNOWN, Foliation, RelationOracle,
                                conical_piece_sample, earliest_set_direct, intersection_points,
                                minkowski_battery, separation_conditions, span_residual,
                                upper_bound_defect)


def T(x, xi):
    return TangentVector(np.array(x, float), np.array(xi, float))


M2 = Minkowski(2)


@pytest.fixture(scope="module")
def wide():
    """A large source region around the origin, observed from a tube near (0, -3)."""
    fin = Foliation(M2, TimelikePath.vertical([0.0, 0.0], t0=-2.0), 2.5, "in")
    fout = Foliation(M2, TimelikePath.vertical([0.0, -3.0], t0=3.0), 0.5, "out")
    return fin, fout, RelationOracle(fin, fout)


@pytest.fixture(scope="module")
def separated():
    fin = Foliation(M2, TimelikePath.vertical([-2.0, 0.0], t0=0.0), 0.5, "in")
    fout = Foliation(M2, TimelikePath.vertical([2.0, 0.0], t0=3.0), 0.5, "out")
    return fin, fout


V1 = T((-2, -2, 0), (1, 1, 0))
V2 = T((-2, 2, 0), (1, -1, 0))
V3 = T((-2, 0, -2), (1, 0, 1))
V0 = T((3, 0, -3), (1, 0, -1))


def test_four_rays_through_origin_are_a_member(wide):
    _, _, o = wide
    q = o.membership(V0, V1, V2, V3)
    assert q.verdict == MEMBER
    assert np.allclose(q.witness.y, 0.0, atol=1e-7)
    assert q.min_gap < 1e-8
    assert q.span_residual < 1e-8


def test_shifted_third_ray_misses_the_common_point(wide):
    _, _, o = wide
    q = o.membership(V0, V1, V2, T((-2, 0, -1.5), (1, 0, 1)))
    assert q.verdict == NONMEMBER
    # the shifted ray passes 0.5/sqrt(2) from the origin
    assert q.min_gap == pytest.approx(0.5 / np.sqrt(2), abs=5e-3)


def test_row_is_serialisable(wide):
    _, _, o = wide
    row = o.membership(V0, V1, V2, V3).row()
    assert row["verdict"] == MEMBER
    assert isinstance(row["min_gap"], float)


def test_input_vectors_must_be_null_and_placed(wide):
    _, _, o = wide
    with pytest.raises(DomainError):
        o.membership(T((3, 0, -3), (1, 0, 0)), V1, V2, V3)
    with pytest.raises(DomainError):
        o.membership(V0, T((5, 0, 0), (1, 1, 0)), V2, V3)


def test_span_residual_detects_dependence():
    xs = [np.array([1, 1, 0.0]), np.array([1, -1, 0.0]), np.array([1, 0, 1.0])]
    assert span_residual(np.array([1, 0, -1.0]), xs) < 1e-12
    assert span_residual(np.array([1, 0, -1.0]), xs[:2]) > 0.1


def test_separation_conditions(wide, separated):
    assert separation_conditions(*separated) == {"in_vs_out_bottom": True, "out_vs_in_top": True}
    # the wide source region reaches the future of the observation tube
    assert separation_conditions(*wide[:2]) == {"in_vs_out_bottom": False, "out_vs_in_top": False}


@pytest.fixture(scope="module")
def battery(separated):
    fin, fout = separated
    quads, certified = minkowski_battery(fin, fout, 200, seed=1)
    o = RelationOracle(fin, fout)
    return quads, certified, [o.membership(*q) for q in quads]


def test_battery_has_both_kinds(battery):
    _, certified, _ = battery
    assert 50 < sum(certified) < 150


def test_members_have_true_witnesses(battery):
    """Soundness: every member's witness lies on all four geodesics."""
    quads, _, res = battery
    members = [(q, r) for q, r in zip(quads, res) if r.verdict == MEMBER]
    assert members
    for q, r in members:
        y = r.witness.y
        for v in q:
            d = y - v.x
            w = v.xi / v.xi[0]
            # flat geodesics are straight lines
            assert np.linalg.norm(d - d[0] * w) < 1e-7


def test_certified_quads_are_never_rejected(battery):
    _, certified, res = battery
    verdicts = [r.verdict for c, r in zip(certified, res) if c]
    assert NONMEMBER not in verdicts
    # an unknown verdict only appears when the reason is a cut-point window
    for c, r in zip(certified, res):
        if c and r.verdict == UNKNOWN:
            assert "cut" in r.reason


def test_uncertified_quads_are_rejected(battery):
    _, certified, res = battery
    assert all(r.verdict == NONMEMBER for c, r in zip(certified, res) if not c)


def test_battery_is_reproducible(separated):
    a, ca = minkowski_battery(*separated, 10, seed=4)
    b, cb = minkowski_battery(*separated, 10, seed=4)
    assert np.array_equal(ca, cb)
    assert all(np.allclose(u.x, v.x) and np.allclose(u.xi, v.xi) for p, q in zip(a, b) for u, v in zip(p, q))


@settings(max_examples=10, deadline=None)
@given(st.floats(0.2, 1.4), st.floats(-1.0, 1.0))
def test_meeting_rays_have_one_intersection(wide, a, b):
    """Two rays aimed at a common interior point intersect exactly there."""
    _, _, o = wide
    y = np.array([0.0, 0.3 * b, 0.3 * b])
    d1 = np.array([np.cos(a), np.sin(a)])
    d2 = np.array([np.cos(a + 2.0), np.sin(a + 2.0)])
    v1 = T(y - 1.5 * np.r_[1.0, d1], np.r_[1.0, d1])
    v2 = T(y - 1.5 * np.r_[1.0, d2], np.r_[1.0, d2])
    pts = intersection_points(o, v1, v2)
    assert len(pts) == 1
    assert np.allclose(pts[0][0], y, atol=1e-7)


def test_parallel_rays_give_an_empty_piece(wide):
    fin, fout, o = wide
    P = conical_piece_sample(V1, T((-2, -2, 0.5), (1, 1, 0)), fin, fout, budget=200, oracle=o)
    assert len(P) == 0
    assert len(P.intersections) == 0


def test_zero_budget_gives_an_empty_piece(wide):
    fin, fout, o = wide
    P = conical_piece_sample(V1, V2, fin, fout, budget=0, oracle=o)
    assert len(P) == 0 and P.queries == 0


def test_unknown_gap_policy_rejected(wide):
    fin, fout, o = wide
    with pytest.raises(DomainError):
        conical_piece_sample(V1, V2, fin, fout, oracle=o, gap_policy="loose")


@pytest.fixture(scope="module")
def piece(wide):
    fin, fout, o = wide
    return conical_piece_sample(V1, V2, fin, fout, budget=300, pitch=0.1, oracle=o)


def test_conical_piece_is_the_light_cone_of_the_meeting_point(wide, piece):
    _, fout, o = wide
    assert len(piece) > 100
    assert np.allclose(piece.intersections, 0.0, atol=1e-8)
    P = piece.points
    # each sample is a future null displacement from the origin inside Omega_out
    assert np.abs(-P[:, 0] ** 2 + (P[:, 1:] ** 2).sum(1)).max() < 1e-8
    assert (P[:, 0] > 0).all()
    assert fout.contains(P).all()
    assert upper_bound_defect(piece, o) < 1e-8


def test_conical_piece_has_full_local_rank(piece):
    assert np.all(piece.local_rank() == 2)


def test_direct_earliest_set_is_the_flat_cone(wide):
    _, fout, _ = wide
    x = np.array([2.9, 0.0, -1.8])
    E = earliest_set_direct(x, fout, pitch=0.1)
    assert len(E) > 100
    assert E.meta["n_cut"] == 0
    d = E.points - x
    assert np.abs(-d[:, 0] ** 2 + (d[:, 1:] ** 2).sum(1)).max() < 1e-10
    assert (d[:, 0] > 0).all()
    assert fout.contains(E.points).all()


def test_direct_earliest_set_requires_x_not_below_the_region(wide):
    _, fout, _ = wide
    with pytest.raises(DomainError):
        earliest_set_direct(np.array([0.0, 0.0, -3.0]), fout, pitch=0.1)


def test_direct_earliest_set_empty_when_cone_misses(wide):
    _, fout, _ = wide
    # far enough to the side and late enough that the cone passes above the tube
    E = earliest_set_direct(np.array([4.0, 0.0, 3.0]), fout, pitch=0.1, check_hypothesis=False)
    assert E.empty


def test_battery_in_three_space_dimensions():
    m = Minkowski(3)
    fin = Foliation(m, TimelikePath.vertical([-2.0, 0.0, 0.0], t0=0.0), 0.5, "in")
    fout = Foliation(m, TimelikePath.vertical([2.0, 0.0, 0.0], t0=3.0), 0.5, "out")
    quads, certified = minkowski_battery(fin, fout, 40, seed=2)
    o = RelationOracle(fin, fout)
    for c, q in zip(certified, quads):
        r = o.membership(*q)
        assert r.verdict != NONMEMBER if c else r.verdict == NONMEMBER
