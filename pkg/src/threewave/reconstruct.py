"""Recovery of earliest observation sets and of the conformal factor from interaction data.

Earliest sets along a light ray are assembled from relation-derived sets
E(v1, v2) filtered by f_0 < f_crit; the conformal factor at a point is read off
the calibrated principal interaction data.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .beams import build_beam, matched_conformal_beam
from .interaction import (InteractionConfig, PreparedInteraction, CombinedPhase, prepare_interaction,
                          eval_D_semi, _closest_param)
from .manifold import (LorentzianMetric, ScalarField, Conformal, TangentVector, SpacetimePoint,
                       DomainError, as_point)
from .causality import TimelikePath, orthonormal_frame, null_connection, cut_time
from .relation import (Foliation, RelationOracle, EarliestObservationSet, earliest_set_from_relation,
                       earliest_set_direct, conical_piece_sample, witness_groups, ConicalPiece, _back_into,
                       _closest_on)

# latest departures closer than this to the anchor count as the anchor itself
DEPARTURE_MARGIN = 1e-4
# smallest witness group treated as an open piece of a cone
MIN_GROUP = 12


# -- earliest arrivals on sampled sets ------------------------------------------------------

def _bisect(pred, lo=-1.0, hi=1.0, tol=1e-9):
    """Boundary of a monotone predicate on [lo, hi] (pred(hi) True, pred(lo) False)."""
    while hi - lo > tol:
        c = 0.5 * (lo + hi)
        if pred(c):
            hi = c
        else:
            lo = c
    return 0.5 * (lo + hi)


def earliest_arrival(oracle: RelationOracle, mu: TimelikePath, y, tol=1e-9) -> float:
    """f^+_mu(y) = inf{s : y << mu(s)}, or 1 when mu never enters the future of y."""
    y = as_point(y)
    hit = lambda s: bool(oracle.follows(y, mu(np.array([s])))[0][0])
    if not hit(1.0):
        return 1.0
    if hit(-1.0):
        return -1.0
    return _bisect(hit, tol=tol)


def latest_departure(oracle: RelationOracle, mu: TimelikePath, y, tol=1e-9) -> float:
    """f^-_mu(y) = sup{s : mu(s) << y}, or -1 when no point of mu precedes y."""
    y = as_point(y)
    before = lambda s: bool(oracle.precedes(mu(np.array([s])), y)[0][0])
    if not before(-1.0):
        return -1.0
    if before(1.0):
        return 1.0
    return _bisect(lambda t: not before(t), tol=tol)


def f_a(cone_points, fol_out: Foliation, a, pitch: float) -> float:
    """inf{s : mu_a(s) in pi(C)} from cone samples, or 1 when the samples miss mu_a.

    Samples within two pitches of mu_a (in foliation coordinates) are kept; on the
    lowest sheet among them t is fitted linearly in the transverse coordinate and
    evaluated at a, so the estimate is not biased by the sample spacing.
    """
    P = np.asarray(cone_points, float).reshape(-1, fol_out.metric.dim)
    if len(P) == 0:
        return 1.0
    a = np.asarray(a, float)
    t, A, ok = fol_out.inverse(P)
    near = ok & (np.linalg.norm(A - a, axis=1) < 2.0 * pitch) & (np.abs(t) <= 1.0)
    if not near.any():
        return 1.0
    t, A = t[near], A[near]
    sheet = t < t.min() + 2.0 * pitch
    da = np.linalg.norm(A[sheet] - a, axis=1)
    if sheet.sum() >= A.shape[1] + 1:
        M = np.column_stack([np.ones(sheet.sum()), A[sheet] - a])
        coef, *_ = np.linalg.lstsq(M, t[sheet], rcond=None)
        val = float(coef[0])
    elif da.min() < 0.5 * pitch:
        val = float(t[sheet][np.argmin(da)])
    else:
        return 1.0
    return float(np.clip(val, -1.0, 1.0))


# -- candidates over the neighbourhood U' ----------------------------------------------------

@dataclass
class Neighborhood:
    """Sampling of U' around v1.

    Candidates v2 are light vectors over Omega_in whose geodesic crosses gamma_v1
    at parameter r, at angle alpha (first alpha in ``alphas`` that reaches Omega_in).
    ``radius`` bounds the feature distance of v2 from v1; farther candidates are dropped.
    """

    r_values: Sequence[float]
    alphas: Sequence[float] = (0.1, 0.03)
    radius: float = 2.0

    def as_dict(self):
        return {"r_values": [float(r) for r in self.r_values], "alphas": [float(a) for a in self.alphas],
                "radius": float(self.radius)}


def _features(v: TangentVector):
    return np.concatenate([v.x, v.xi[1:] / v.xi[0]])


def candidate_vectors(oracle: RelationOracle, v1: TangentVector, U: Neighborhood) -> list:
    """(r, alpha, v2) for each r of the grid that admits a candidate."""
    m = oracle.metric
    r1 = oracle.ray(v1)
    f1 = _features(v1)
    out = []
    for r in U.r_values:
        if not (0.0 <= r <= r1.hi):
            continue
        y, xi = r1.point(r), r1.velocity(r)
        fr = orthonormal_frame(m, y)
        c = np.linalg.solve(fr.T, xi)
        W = c[1:] / c[0]
        for al in U.alphas:
            if m.n == 2:
                th = np.arctan2(W[1], W[0]) + al
                w = np.array([np.cos(th), np.sin(th)])
            else:
                # rotate in the plane of W and the least aligned axis
                e = np.eye(m.n)[np.argmin(np.abs(W))]
                e = e - (e @ W) * W
                e /= np.linalg.norm(e)
                w = np.cos(al) * W + np.sin(al) * e
            v2, _ = _back_into(oracle, y, fr[0] + w @ fr[1:], oracle.fol_in)
            if v2 is None:
                continue
            if np.linalg.norm(_features(v2) - f1) > U.radius:
                continue
            out.append((float(r), float(al), v2))
            break
    return out


# -- the critical value and the shortcut set W ------------------------------------------------

@dataclass
class Candidate:
    r: float
    alpha: float
    v2: TangentVector
    E: EarliestObservationSet
    f0: float
    groups: list = field(default_factory=list)
    in_W: bool = False
    shortcut: dict | None = None
    recovered: bool = False
    seconds: float = 0.0
    skipped: bool = False

    def as_dict(self) -> dict:
        return {"r": self.r, "alpha": self.alpha, "v2": {"x": self.v2.x.tolist(), "xi": self.v2.xi.tolist()},
                "n_E": len(self.E), "n_cone": int(self.E.meta.get("n_cone", 0)), "f0": self.f0,
                "groups": self.groups, "in_W": self.in_W, "shortcut": self.shortcut,
                "recovered": self.recovered, "skipped": self.skipped, "seconds": self.seconds}


def _group_summary(E: EarliestObservationSet, n):
    """Witness groups of E that are open pieces of a cone: (vertex, indices)."""
    W = E.meta.get("witness", np.zeros((0, E.points.shape[1])))
    out = []
    if len(W) == 0:
        return out
    lab = witness_groups(W)
    for g in np.unique(lab):
        idx = np.nonzero(lab == g)[0]
        if len(idx) < MIN_GROUP:
            continue
        piece = ConicalPiece((), np.zeros((0, W.shape[1])), E.points[idx], E.vectors[idx], W[idx], E.pitch)
        if np.mean(piece.local_rank() == n) < 0.5:
            continue
        out.append((W[idx].mean(axis=0), idx))
    return out


def _connect(m, x, y, offsets=tuple(np.arange(0.05, 0.65, 0.05)), tol=1e-6):
    """null_connection from x to y with rotated starting directions.

    Past the focal region the straight guess sits between the fastest
    connections and the shooting stalls there, so nearby directions are tried.
    x sits on the boundary of the past of y only up to the bisection accuracy of
    the departure time, hence the looser end-point tolerance.
    """
    ok, V = null_connection(m, x, y, tol=tol)
    if ok:
        return ok, V
    fr = orthonormal_frame(m, x)
    comp = fr @ m.g(x) @ (y - x)
    a0 = comp[1:] / np.linalg.norm(comp[1:])
    planes = [np.eye(m.n)[k] for k in range(m.n)]
    for off in offsets:
        for e in planes:
            e = e - (e @ a0) * a0
            if np.linalg.norm(e) < 1e-8:
                continue
            e /= np.linalg.norm(e)
            for sg in (1.0, -1.0):
                ok, V = null_connection(m, x, y, guess=np.cos(off) * a0 + sg * np.sin(off) * e, tol=tol)
                if ok:
                    return ok, V
    return False, V


def _shortcut(oracle, v1, cand: Candidate, s, fol_in, fol_out, budget, pitch, gap_policy):
    """Search for (v1~, v2~, C) certifying v2 in W; returns the certificate or None.

    For each cone piece of E(v1, v2) with vertex y^ the latest departure s~ of
    mu_in towards y^ proposes v1~ (the light vector from mu_in(s~) to y^) and
    v2~ = v2. The certificate is the part of the sampled CP(v1~, v2~) that lies
    on the piece, and it must itself be an open piece (rank n).
    """
    m = oracle.metric
    mu = fol_in.path
    for y, idx in _group_summary(cand.E, m.n):
        st = latest_departure(oracle, mu, y)
        if st <= s + DEPARTURE_MARGIN:
            continue
        x = mu(np.array(st))
        ok, V = _connect(m, x, y)
        if not ok:
            continue
        # base v1~ a little after mu_in(s~) so that mu_in(s~) lies on its past half
        r = oracle.ray(TangentVector(SpacetimePoint(x), V))
        eps = min(1e-3, 0.25 * r.hi)
        vt = TangentVector(SpacetimePoint(r.point(eps)), r.velocity(eps))
        if not fol_in.contains(vt.x[None])[0]:
            continue
        P = conical_piece_sample(vt, cand.v2, fol_in, fol_out, budget, pitch, oracle, gap_policy)
        if len(P) == 0:
            continue
        Fe = cand.E.features()[idx]
        Fp = np.column_stack([P.points, P.vectors[:, 1:] / P.vectors[:, :1]])
        dist, _ = cKDTree(Fe).query(Fp)
        inside = dist < 0.5 * max(pitch, P.pitch)
        if inside.sum() < MIN_GROUP:
            continue
        sub = ConicalPiece(P.anchors, P.intersections, P.points[inside], P.vectors[inside],
                           P.witness[inside], P.pitch)
        if np.mean(sub.local_rank() == m.n) < 0.5:
            continue
        return {"vertex": y.tolist(), "s_tilde": float(st), "v1_tilde": {"x": vt.x.tolist(), "xi": vt.xi.tolist()},
                "n_certified": int(inside.sum())}
    return None


def f_crit_and_W(oracle: RelationOracle, v1: TangentVector, candidates: list, s: float,
                 budget: int = 4000, pitch: float = 0.05, gap_policy: str = "permissive"):
    """(f_crit, W, flags) over sampled candidates; f_crit = +inf when no candidate is in W."""
    flags = []
    if budget <= 0 or not candidates:
        flags.append("insufficient sampling")
        return np.inf, [], flags
    W = []
    best = np.inf
    # ascending f0: once a member is certified, candidates above it cannot lower f_crit
    for cand in sorted(candidates, key=lambda c: c.f0):
        if cand.E.empty:
            continue
        if cand.f0 >= best:
            cand.skipped = True
            continue
        cert = _shortcut(oracle, v1, cand, s, oracle.fol_in, oracle.fol_out, budget, pitch, gap_policy)
        if cert is not None:
            cand.in_W, cand.shortcut = True, cert
            W.append(cand)
            best = min(best, cand.f0)
    f_crit = min((c.f0 for c in W), default=np.inf)
    return float(f_crit), W, flags


# -- recovery of the earliest sets along gamma_v1 ---------------------------------------------

@dataclass
class RecoveryReport:
    v1: TangentVector
    s: float
    f_crit: float
    candidates: list
    W: list
    recovered: list
    pitch: float
    gap_policy: str
    flags: list = field(default_factory=list)
    comparison: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def family(self) -> list:
        return [c.E for c in self.recovered]

    def as_dict(self) -> dict:
        return {"anchor": {"v1": {"x": self.v1.x.tolist(), "xi": self.v1.xi.tolist()}, "s": self.s},
                "f_crit": self.f_crit if np.isfinite(self.f_crit) else "inf",
                "W": [c.r for c in self.W], "recovered": [c.r for c in self.recovered],
                "candidates": [c.as_dict() for c in self.candidates], "pitch": self.pitch,
                "gap_policy": self.gap_policy, "flags": self.flags, "comparison": self.comparison,
                "timings": self.timings}


def check_anchor(oracle: RelationOracle, v1: TangentVector, s: float, tol=1e-6):
    """mu_in(s) lies on the backward geodesic of v1 and that geodesic misses mu_0."""
    r = oracle.ray(v1)
    x1 = oracle.fol_in.path(np.array(s))
    grid = np.linspace(r.lo, 0.0, 2001)
    d = np.linalg.norm(r.point(grid) - x1, axis=1)
    if d.min() > 1e-2:
        raise DomainError(f"mu_in({s}) is not on the backward geodesic of v1 (distance {d.min():.2e})")
    dist, _ = _closest_on(r, (r.lo, 0.0), x1)
    if dist > tol:
        raise DomainError(f"mu_in({s}) is not on the backward geodesic of v1 (distance {dist:.2e})")
    mu0 = oracle.fol_out.path
    ts = np.linspace(-1, 1, 401)
    P = r.point(np.linspace(r.lo, r.hi, 4001))
    gap = np.min(np.linalg.norm(P[:, None, :] - mu0(ts)[None], axis=2))
    if gap < 1e-3:
        raise DomainError("the geodesic of v1 meets mu_0")


def recover_E_family(oracle: RelationOracle, v1: TangentVector, s: float, U: Neighborhood,
                     budget: int = 4000, pitch: float = 0.05, gap_policy: str = "permissive",
                     candidates=None) -> RecoveryReport:
    """Earliest sets along gamma_v1 from relation-derived sets E(v1, v2), v2 over U'.

    The family keeps E(v1, v2) with f_0(v1, v2) < f_crit and f_0 < 1. Only relation
    output enters the family; the r values of the candidates are carried for reporting.
    """
    t0 = time.perf_counter()
    fol_in, fol_out = oracle.fol_in, oracle.fol_out
    check_anchor(oracle, v1, s)
    if candidates is None:
        candidates = candidate_vectors(oracle, v1, U) if budget > 0 else []
    cands = []
    for r, al, v2 in candidates:
        tc = time.perf_counter()
        E = earliest_set_from_relation(v1, v2, fol_in, fol_out, budget, pitch, oracle, gap_policy=gap_policy)
        f0 = f_a(E.meta.get("cone_points", np.zeros((0, oracle.metric.dim))), fol_out,
                 np.zeros(oracle.metric.n), max(pitch, E.pitch))
        cand = Candidate(r, al, v2, E, f0, seconds=time.perf_counter() - tc)
        cand.groups = [{"vertex": y.tolist(), "size": int(len(idx))}
                       for y, idx in _group_summary(E, oracle.metric.n)]
        cands.append(cand)
    t1 = time.perf_counter()
    f_crit, W, flags = f_crit_and_W(oracle, v1, cands, s, budget, pitch, gap_policy)
    t2 = time.perf_counter()
    rec = []
    for c in cands:
        c.recovered = bool(c.f0 < f_crit and c.f0 < 1.0 and not c.E.empty)
        if c.recovered:
            rec.append(c)
    return RecoveryReport(v1, float(s), f_crit, cands, W, rec, pitch, gap_policy, flags,
                          timings={"sets": t1 - t0, "W": t2 - t1, "total": time.perf_counter() - t0})


def compare_with_direct(report: RecoveryReport, oracle: RelationOracle, rho: float | None = None,
                        tol_factor: float = 10.0) -> dict:
    """Harness-side check against earliest_set_direct along gamma_v1.

    Each recovered set is matched to the direct set at the parameter of its witness;
    the direct sets at the candidates' own parameters beyond the cut must be absent
    from the recovered family.
    """
    t0 = time.perf_counter()
    m = oracle.metric
    v1 = report.v1
    r1 = oracle.ray(v1)
    if rho is None:
        cr = cut_time(m, v1, oracle.box)
        rho = float(cr.rho)
    tol = tol_factor * report.pitch
    pairs = []
    for c in report.recovered:
        W = c.E.meta["witness"]
        y = W.mean(axis=0)
        _, rw = _closest_on(r1, (0.0, r1.hi), y)
        D = earliest_set_direct(r1.point(rw), oracle.fol_out, report.pitch, oracle, check_hypothesis=False)
        h = c.E.hausdorff(D)
        pairs.append({"r_candidate": c.r, "r_witness": float(rw), "hausdorff": float(h),
                      "n_recovered": len(c.E), "n_direct": len(D), "ok": bool(h < tol and rw < rho)})
    post = []
    for c in report.candidates:
        if c.r <= rho:
            continue
        D = earliest_set_direct(r1.point(c.r), oracle.fol_out, report.pitch, oracle, check_hypothesis=False)
        dists = [float(D.hausdorff(e.E)) for e in report.recovered]
        dmin = min(dists, default=np.inf)
        # a recovered set stands for D when it is within tol of D and closer to D than
        # to the direct set at its own witness; sets along the ray can be nearer than tol
        hits = [p["r_candidate"] for d, p in zip(dists, pairs) if d < tol and d <= p["hausdorff"]]
        post.append({"r": c.r, "n_direct": len(D), "min_hausdorff_to_family": dmin,
                     "matched_by": hits, "absent": not hits})
    rec_r = [p["r_witness"] for p in pairs]
    f0s = [c.f0 for c in report.recovered]
    order = np.argsort(f0s)
    mono = bool(np.all(np.diff(np.asarray(rec_r)[order]) > 0)) if len(rec_r) > 1 else True
    beyond = [p["r_candidate"] for p in pairs if p["r_witness"] >= rho]
    out = {"rho": rho, "tolerance": tol, "pairs": pairs, "post_cut": post, "monotone": mono,
           "all_pairs_ok": all(p["ok"] for p in pairs), "post_cut_absent": all(p["absent"] for p in post) and not beyond,
           "witness_beyond_cut": beyond,
           "seconds": time.perf_counter() - t0}
    report.comparison = out
    return out


# -- conformal factor ---------------------------------------------------------------------

def conformal_exponent(n: int, m_exp: int) -> float:
    """Power of c(y) in the calibrated interaction data, -(n-3)/2 - (n-1)(m-3)/4."""
    return -(n - 3) / 2.0 - (n - 1) * (m_exp - 3) / 4.0


@dataclass
class ConformalConfig:
    """Probe configuration around y on g = c * hat.

    ``directions`` are four future null directions (xi0 towards the observation
    side, xi1..xi3 from the sources) with xi0 in the span of the others; by default
    they are generated in the plane of the first two spatial axes plus a tilt.
    Sources sit ``distance`` back along each direction (forward for xi0).
    """

    hat: LorentzianMetric
    c: ScalarField
    directions: Sequence | None = None
    distance: float = 1.0
    lams: Sequence[float] = (40.0, 60.0, 90.0, 135.0)
    delta: float = 0.5
    tube: float = 2.0
    probe_amp: float = 1.0
    probe_lam: float = 1.0
    max_points: int = 40_000_000


@dataclass
class ConformalEstimate:
    y: np.ndarray
    c: float
    c_true: float | None
    exponent: float
    ratio: float
    ratio_error: float
    data: float
    reference: float
    probe_value: float
    lams: np.ndarray
    ratios: np.ndarray
    timings: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"y": self.y.tolist(), "c": self.c, "c_true": self.c_true, "exponent": self.exponent,
                "ratio": self.ratio, "ratio_error": self.ratio_error, "data": self.data,
                "reference": self.reference, "probe_value": self.probe_value,
                "lams": self.lams.tolist(), "ratios": self.ratios.tolist(), "timings": self.timings}


def _eta_gram_schmidt(B):
    """Minkowski-orthonormal basis of the span of future null columns B (timelike vector first)."""
    eta = np.diag([-1.0] + [1.0] * (B.shape[0] - 1))
    ip = lambda a, b: a @ eta @ b
    cols = list(B.T)
    cols = [np.mean(cols, axis=0)] + [c - cols[0] for c in cols[1:]]
    out = []
    for v in cols:
        w = v.copy()
        for e in out:
            w = w - ip(w, e) / ip(e, e) * e
        out.append(w / np.sqrt(abs(ip(w, w))))
    return out


def default_directions(n: int, spread: float = 2.0, tilt: float = 0.35) -> np.ndarray:
    """xi0..xi3 for the probe: three source directions fanned around e_1, xi0 null in their span."""
    def nd(th, ph=0.0):
        w = np.zeros(n)
        w[0], w[1] = np.cos(th) * np.cos(ph), np.sin(th) * np.cos(ph)
        if n > 2:
            w[2] = np.sin(ph)
        return np.concatenate([[1.0], w])
    src = np.array([nd(0.0), nd(spread), nd(-spread, tilt if n > 2 else 0.0)])
    e0, e1, e2 = _eta_gram_schmidt(src.T)
    if e0[0] < 0:
        e0 = -e0
    # a null direction of the span between the first two sources
    a1 = np.array([src[0] @ np.diag([-1.0] + [1.0] * n) @ e for e in (e1, e2)])
    a2 = np.array([src[1] @ np.diag([-1.0] + [1.0] * n) @ e for e in (e1, e2)])
    th = 0.5 * (np.arctan2(a1[1], a1[0]) + np.arctan2(a2[1], a2[0]))
    xi0 = e0 + np.cos(th) * e1 + np.sin(th) * e2
    return np.vstack([xi0 / xi0[0], src])


def _probe_vectors(y, dirs, distance):
    out = [TangentVector(SpacetimePoint(y + distance * dirs[0]), dirs[0])]
    for xi in dirs[1:]:
        out.append(TangentVector(SpacetimePoint(y - distance * xi), xi))
    return out


def _probe(beam, amp, lam):
    def u(X):
        return amp * np.real(beam(X, lam))
    return u


def _matched_prep(prep_hat: PreparedInteraction, g, c, cfg: ConformalConfig, u_f, m_exp,
                  margin=2.5) -> PreparedInteraction:
    """The same interaction on g = c * hat: beams matched to the hat beams at their sources."""
    y = prep_hat.y
    beams, vecs, s_par, tang = [], [], [], []
    for hb in prep_hat.beams:
        q = hb.chart.v.x
        v = TangentVector(hb.chart.v.base, hb.chart.v.xi / float(c.value(q)))
        s = _closest_param(g, v, y, s_max=4 * cfg.distance + margin)
        lo, hi = min(0.0, s) - margin, max(0.0, s) + margin
        b = matched_conformal_beam(hb, g, c, (lo, hi), delta=cfg.tube)
        beams.append(b)
        vecs.append(v)
        s_par.append(s)
        tang.append(b.chart.gamma_dot(np.array(s)))
    icfg = InteractionConfig(g, vecs, kappas=list(prep_hat.kappas), delta=cfg.delta, tube=cfg.tube,
                             u_f=u_f, m=m_exp, s_max=4 * cfg.distance + margin)
    pts = np.array([b.chart.gamma(np.array(s)) for b, s in zip(beams, s_par)])
    spread = float(np.max(np.linalg.norm(pts - y, axis=1)))
    return PreparedInteraction(icfg, y, np.array(s_par), np.array(tang), prep_hat.kappas.copy(),
                               beams, CombinedPhase(beams, y), spread)


def recover_conformal_factor(y, n: int, m_exp: int, config: ConformalConfig) -> ConformalEstimate:
    """c(y) from the interaction data on g = c * hat, calibrated by the same pipeline on hat.

    The sources and beams are fixed by conformal-class data only (the hat beams);
    on g they are the matched beams, whose amplitudes at y carry c(y)^{-(n-1)/4}.
    The probe u_f is the real part of a low-frequency beam along xi1 with the
    same matching. The ratio of the two extrapolated limits is c(y)^e.
    """
    e = conformal_exponent(n, m_exp)
    if m_exp < 3:
        raise DomainError("the interaction data need m >= 3")
    if abs(e) < 1e-15:
        raise DomainError(f"(n, m) = ({n}, {m_exp}): the exponent of c(y) is identically zero, "
                          "so the principal interaction data carry no information on c")
    hat = config.hat
    if hat.n != n:
        raise DomainError(f"reference metric has n = {hat.n}, expected {n}")
    y = as_point(y)
    g = Conformal(hat, config.c)
    dirs = default_directions(n) if config.directions is None else np.asarray(config.directions, float)
    vecs = _probe_vectors(y, dirs, config.distance)
    lams = tuple(float(l) for l in config.lams)
    t0 = time.perf_counter()
    # the probe beam along xi1 (hat) and its matched copy on g
    pv = vecs[1]
    s_probe = config.distance
    probe_hat = build_beam(hat, pv, 1.0, config.probe_lam, delta=config.tube,
                           s_range=(-0.5, s_probe + 2.5))
    ps = _closest_param(g, TangentVector(pv.base, pv.xi / float(config.c.value(pv.x))), y,
                        s_max=4 * config.distance + 2.5)
    probe_g = matched_conformal_beam(probe_hat, g, config.c, (-0.5, ps + 2.5), delta=config.tube)
    u_hat = _probe(probe_hat, config.probe_amp, config.probe_lam)
    u_g = _probe(probe_g, config.probe_amp, config.probe_lam)
    icfg = InteractionConfig(hat, vecs, delta=config.delta, tube=config.tube, u_f=u_hat, m=m_exp,
                             s_max=4 * config.distance + 2.5)
    prep_hat = prepare_interaction(icfg, y=y, lam=lams[0])
    prep_g = _matched_prep(prep_hat, g, config.c, config, u_g, m_exp)
    if prep_g.spread > 1e-6:
        raise DomainError(f"matched geodesics miss y by {prep_g.spread:.2e}")
    t1 = time.perf_counter()
    ref = eval_D_semi(prep_hat, lams, max_points=config.max_points)
    t2 = time.perf_counter()
    dat = eval_D_semi(prep_g, lams, max_points=config.max_points)
    t3 = time.perf_counter()
    if abs(ref.full_limit) < 1e-12:
        raise DomainError("reference interaction data vanish; the ratio is undefined")
    ratios = dat.full / ref.full
    ratio = dat.full_limit / ref.full_limit
    # the error of a quotient of two extrapolations
    rerr = abs(ratio) * (dat.full_error / max(abs(dat.full_limit), 1e-300)
                         + ref.full_error / abs(ref.full_limit))
    if ratio <= 0:
        raise DomainError(f"calibrated ratio {ratio:.3e} is not positive")
    c_est = float(ratio ** (1.0 / e))
    return ConformalEstimate(y, c_est, float(config.c.value(y)), e, float(ratio), float(rerr),
                             float(dat.full_limit), float(ref.full_limit),
                             float(u_g(y[None])[0]) if m_exp > 3 else 1.0,
                             np.asarray(lams), np.asarray(ratios, float),
                             {"setup": t1 - t0, "reference": t2 - t1, "data": t3 - t2})
