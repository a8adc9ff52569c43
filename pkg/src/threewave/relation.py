"""Foliated source/observation regions, the three-to-one scattering relation oracle,
conical pieces and earliest observation sets.

Sets are finite samples of light vectors with a declared sampling pitch. The
relation oracle is three-valued: ``member`` when the sufficient condition holds
(common point before all cut points plus the span condition), ``nonmember`` when
no common point exists, ``unknown`` in between.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.ndimage import minimum_filter
from scipy.optimize import least_squares, minimize_scalar
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, directed_hausdorff

from .manifold import (LorentzianMetric, Minkowski, Conformal, TangentVector, SpacetimePoint,
                       DomainError, as_point)
from .geodesics import CoordinateBox, flow_states, trace_states, geodesic_rhs, TOL_GEO, ATOL_GEO
from .causality import TimelikePath, chronological, flat_factor, get_fan, orthonormal_frame, TAU_TOL

MEMBER, NONMEMBER, UNKNOWN = "member", "nonmember", "unknown"
GAP_TOL = 1e-5
WITNESS_TOL = 1e-7
SPAN_TOL = 1e-6
N_BRACKETS = 64


def _rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# foliations

class Foliation:
    """Omega = F((-1, 1) x B(0, delta)) with F(t, a) = exp_{mu(t)}(sum a^i e_i(t)).

    The frame e_i is an orthonormal basis of mu'(-1)^perp parallel transported
    along mu.
    """

    def __init__(self, metric: LorentzianMetric, path: TimelikePath, delta: float, side: str = "out"):
        if side not in ("in", "out"):
            raise DomainError("side must be 'in' or 'out'")
        if delta <= 0:
            raise DomainError("delta must be positive")
        self.metric = metric
        self.path = path
        self.delta = float(delta)
        self.side = side
        self._frame0 = self._initial_frame()
        self._flat = metric.is_flat or self._flat_near_path()
        self._transport = None if self._flat else self._solve_transport()
        self._ts = np.linspace(-1.0, 1.0, 401)
        self._mus = path(self._ts)

    @property
    def n(self):
        return self.metric.n

    def _initial_frame(self):
        m = self.metric
        x = self.path(np.array(-1.0))
        u = self.path.tangent(np.array(-1.0))
        gm = m.g(x)
        u = u / np.sqrt(-(u @ gm @ u))
        basis = []
        for k in range(1, m.dim):
            w = np.eye(m.dim)[k]
            w = w + (w @ gm @ u) * u
            for e in basis:
                w = w - (w @ gm @ e) * e
            basis.append(w / np.sqrt(w @ gm @ w))
        return np.array(basis)

    def _flat_near_path(self):
        """True when the metric is constant on a box holding every exp_{mu(t)}(a^i e_i).

        The frame is then constant along mu and the exponential map is affine."""
        P = self.path(np.linspace(-1.0, 1.0, 201))
        reach = self.delta * float(np.max(np.linalg.norm(self._frame0, axis=1))) + 1e-6
        return bool(self.metric.flat_on_box(P.min(axis=0) - reach, P.max(axis=0) + reach))

    def _solve_transport(self):
        m = self.metric
        d, n = m.dim, m.n

        def rhs(t, y):
            E = y.reshape(n, d)
            x = self.path(np.array(t))
            dx = self.path.tangent(np.array(t))
            gam = m.christoffel(x)
            return (-np.einsum("ijk,j,ak->ai", gam, dx, E)).ravel()

        return solve_ivp(rhs, (-1.0, 1.0), self._frame0.ravel(), method="DOP853",
                         rtol=1e-10, atol=1e-12, dense_output=True)

    def frame(self, t):
        """e_i(t), shape (..., n, d)."""
        t = np.asarray(t, float)
        if self._transport is None:
            return np.broadcast_to(self._frame0, t.shape + self._frame0.shape).copy()
        tc = np.clip(t, -1.0, 1.0)
        return self._transport.sol(tc.ravel()).T.reshape(t.shape + self._frame0.shape)

    def F(self, t, a):
        t = np.asarray(t, float)
        a = np.asarray(a, float)
        t, _ = np.broadcast_arrays(t, a[..., 0])
        a = np.broadcast_to(a, t.shape + (self.n,))
        mu = self.path(t)
        V = np.einsum("...i,...id->...d", a, self.frame(t))
        if self._flat:
            return mu + V
        st = np.concatenate([mu, V], axis=-1).reshape(-1, 2 * self.metric.dim)
        end = flow_states(self.metric, st, 1.0)
        return end[:, : self.metric.dim].reshape(mu.shape)

    def inverse(self, X, iters=30, tol=1e-12):
        """(t, a, ok) with F(t, a) = X, by batched Newton from the nearest path sample."""
        X = np.atleast_2d(np.asarray(X, float))
        d = self.metric.dim
        i = np.argmin(cdist(X, self._mus), axis=1)
        t = self._ts[i].copy()
        E = self.frame(t)
        a = np.einsum("kid,kd->ki", E, X - self._mus[i]) / np.einsum("kid,kid->ki", E, E)
        h = 1e-6
        for _ in range(iters):
            P = np.column_stack([t, a])
            R = self.F(P[:, 0], P[:, 1:]) - X
            J = np.empty((len(X), d, d))
            for k in range(d):
                Q = P.copy()
                Q[:, k] += h
                J[:, :, k] = (self.F(Q[:, 0], Q[:, 1:]) - X - R) / h
            step = np.linalg.solve(J, -R[..., None])[..., 0]
            t = t + step[:, 0]
            a = a + step[:, 1:]
            if np.max(np.abs(step)) < tol:
                break
        ok = np.linalg.norm(self.F(t, a) - X, axis=1) < 1e-9
        return t, a, ok

    def contains(self, X, pad=0.0):
        X = np.atleast_2d(np.asarray(X, float))
        t, a, ok = self.inverse(X)
        return ok & (np.abs(t) < 1.0 + pad) & (np.linalg.norm(a, axis=1) < self.delta * (1.0 + pad))

    def a_path(self, a) -> TimelikePath:
        a = np.asarray(a, float)
        return TimelikePath(lambda s: self.F(s, a))

    def sample(self, n_t=9, n_r=3, n_ang=8, closed=False):
        """Points of Omega (or its closure) on a polar grid in (t, a)."""
        edge = 1.0 if closed else 1.0 - 1e-9
        ts = np.linspace(-edge, edge, n_t)
        A = [np.zeros(self.n)]
        for r in np.linspace(0, edge * self.delta, n_r + 1)[1:]:
            A.extend(r * _sphere(self.n, n_ang))
        A = np.array(A)
        T = np.repeat(ts, len(A))
        return self.F(T, np.tile(A, (n_t, 1)))

    def bottom(self, n_r=3, n_ang=8):
        A = [np.zeros(self.n)]
        for r in np.linspace(0, self.delta, n_r + 1)[1:]:
            A.extend(r * _sphere(self.n, n_ang))
        A = np.array(A)
        return self.F(-np.ones(len(A)), A)

    def bounding_box(self, pad=0.0) -> CoordinateBox:
        P = self.sample(17, 2, 16, closed=True)
        return CoordinateBox(P.min(axis=0) - pad, P.max(axis=0) + pad)

    def timelike_defect(self, n_a=6, n_t=21) -> float:
        """max g(dF/dt, dF/dt) over sampled a-curves (negative means timelike)."""
        ts = np.linspace(-0.99, 0.99, n_t)
        worst = -np.inf
        for a in np.vstack([np.zeros(self.n), 0.9 * self.delta * _sphere(self.n, n_a)]):
            h = 1e-5
            D = (self.F(ts + h, a) - self.F(ts - h, a)) / (2 * h)
            X = self.F(ts, a)
            q = np.einsum("ki,kij,kj->k", D, self.metric.g(X), D)
            if np.any(D[:, 0] <= 0):
                return np.inf
            worst = max(worst, float(q.max()))
        return worst

    def describe(self):
        return {"side": self.side, "delta": self.delta}


def _sphere(n, k):
    """k roughly uniform unit vectors in R^n (n = 1, 2, 3)."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        th = np.linspace(0, 2 * np.pi, k, endpoint=False)
        return np.column_stack([np.cos(th), np.sin(th)])
    i = np.arange(k) + 0.5
    z = 1 - 2 * i / k
    phi = np.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z * z)
    out = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    if n == 3:
        return out
    raise DomainError("sampling implemented for n <= 3")


def chrono_pairs(m: LorentzianMetric, X, Y, anchor="x"):
    """x_k << y_k, using null fans at the shared anchor (n = 2) when the metric is curved.

    Returns (bool array, status array)."""
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    X, Y = np.broadcast_arrays(X, Y)
    ok = np.array(["ok"] * len(X), dtype=object)
    conf_flat = isinstance(m, Conformal) and isinstance(m.base, Minkowski)
    if flat_factor(m) is not None or conf_flat or m.n != 2 or anchor == "x":
        return chronological(m, X, Y)
    out = np.zeros(len(X), bool)
    later = Y[:, 0] > X[:, 0]
    groups: dict = {}
    for k in np.nonzero(later)[0]:
        groups.setdefault(tuple(Y[k]), []).append(k)
    for key, idx in groups.items():
        y = np.array(key)
        out[idx] = get_fan(m, y, False, _reach(X[idx], y)).chronological(X[idx])
    return out, ok


def _reach(X, y):
    D = np.atleast_2d(X) - y
    return 1.5 * float(np.max(np.abs(D[:, 0]) + np.linalg.norm(D[:, 1:], axis=1))) + 0.5


def separation_conditions(fol_in: Foliation, fol_out: Foliation, n_t=7, n_r=2, n_ang=8) -> dict:
    """Sampled verdicts of the two separation conditions between the regions.

    ``in_vs_out_bottom``: no sampled point of Omega_in precedes the bottom of Omega_out.
    ``out_vs_in_top``: no sampled point of closure(Omega_out) is in the future of mu_in(1).
    """
    m = fol_in.metric
    P = fol_in.sample(n_t, n_r, n_ang)
    B = fol_out.bottom(n_r, n_ang)
    X = np.repeat(P, len(B), axis=0)
    Y = np.tile(B, (len(P), 1))
    c1, _ = chrono_pairs(m, X, Y, anchor="y")
    top = fol_in.path(np.array(1.0))
    Q = fol_out.sample(n_t, n_r, n_ang, closed=True)
    c2, _ = chronological(m, np.repeat(top[None], len(Q), 0), Q)
    return {"in_vs_out_bottom": bool(not c1.any()), "out_vs_in_top": bool(not c2.any())}


# ---------------------------------------------------------------------------
# rays

class _Ray:
    """Null geodesic through pi(v) inside a coordinate box, parameter s in [lo, hi].

    One integration per direction, stopped by a box-exit event; the backward
    half is integrated on first use.  ``shifted(ds)`` reparametrizes the same
    curve so that s = 0 sits at the old parameter ds.
    """

    def __init__(self, m: LorentzianMetric, v: TangentVector, K: CoordinateBox, s_cap=400.0):
        if not K.contains(v.x):
            raise DomainError("base point outside the relation box")
        self.metric, self.v, self.K, self.s_cap = m, v, K, s_cap
        self.offset = 0.0
        self._parts = {1: self._trace(1), -1: None}

    def _trace(self, sign):
        m, K = self.metric, self.K
        x0, xi = self.v.x, self.v.xi
        if m.is_flat:
            w = sign * xi
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(w > 0, (K.hi - x0) / w, np.where(w < 0, (K.lo - x0) / w, np.inf))
            return (float(np.min(t)), None)
        d = m.dim

        def event(_, y):
            return min(float(np.min(y[:d] - K.lo)), float(np.min(K.hi - y[:d])))
        event.terminal = True
        event.direction = -1
        sol = solve_ivp(lambda _, y: geodesic_rhs(m, y), (0.0, sign * self.s_cap), self.v.state(),
                        method="DOP853", rtol=TOL_GEO, atol=ATOL_GEO, dense_output=True, events=event)
        if sol.status < 0:
            raise DomainError(f"geodesic integration failed: {sol.message}")
        end = sol.t_events[0][0] if len(sol.t_events[0]) else sol.t[-1]
        return (abs(float(end)), sol.sol)

    def _part(self, sign):
        if self._parts[sign] is None:
            self._parts[sign] = self._trace(sign)
        return self._parts[sign]

    @property
    def hi(self):
        return self._part(1)[0] - self.offset

    @property
    def lo(self):
        return -self._part(-1)[0] - self.offset

    def shifted(self, ds) -> "_Ray":
        out = object.__new__(_Ray)
        out.__dict__.update(self.__dict__)
        out.offset = self.offset + float(ds)
        return out

    def state(self, s):
        s = np.asarray(s, float) + self.offset
        d = self.metric.dim
        fwd, bwd = self._part(1), (self._part(-1) if np.any(s < 0) else None)
        s = np.clip(s, -bwd[0] if bwd is not None else 0.0, fwd[0])
        y0 = self.v.state()
        if self.metric.is_flat:
            x = y0[:d] + s[..., None] * y0[d:]
            return np.concatenate([x, np.broadcast_to(y0[d:], x.shape)], axis=-1)
        flat = s.ravel()
        out = np.empty((flat.size, 2 * d))
        pos = flat >= 0
        if pos.any():
            out[pos] = fwd[1](flat[pos]).T
        if (~pos).any():
            out[~pos] = bwd[1](flat[~pos]).T
        return out.reshape(s.shape + (2 * d,))

    def point(self, s):
        return self.state(s)[..., : self.metric.dim]

    def velocity(self, s):
        return self.state(s)[..., self.metric.dim:]


def _pair_minima(ra: _Ray, ia, rb: _Ray, ib, n_brackets=N_BRACKETS, keep=8):
    """Local minima of |gamma_a(s) - gamma_b(t)| over parameter boxes ia, ib."""
    sa = np.linspace(ia[0], ia[1], n_brackets + 1)
    sb = np.linspace(ib[0], ib[1], n_brackets + 1)
    D = cdist(ra.point(sa), rb.point(sb))
    loc = np.argwhere(D <= minimum_filter(D, size=3, mode="nearest"))
    loc = loc[np.argsort(D[loc[:, 0], loc[:, 1]])][:keep]
    out = []
    for i, j in loc:
        sol = least_squares(lambda p: ra.point(p[0]) - rb.point(p[1]), [sa[i], sb[j]],
                            bounds=([ia[0], ib[0]], [ia[1], ib[1]]), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        d = float(np.linalg.norm(sol.fun))
        if not any(abs(sol.x[0] - o[1]) < 1e-7 and abs(sol.x[1] - o[2]) < 1e-7 for o in out):
            out.append((d, float(sol.x[0]), float(sol.x[1])))
    out.sort()
    return out


def _closest_on(r: _Ray, interval, y, n_brackets=N_BRACKETS):
    s = np.linspace(interval[0], interval[1], n_brackets + 1)
    d = np.linalg.norm(r.point(s) - y, axis=-1)
    i = int(np.argmin(d))
    lo, hi = s[max(i - 1, 0)], s[min(i + 1, len(s) - 1)]
    res = minimize_scalar(lambda u: float(np.sum((r.point(u) - y) ** 2)), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-13})
    return float(np.linalg.norm(r.point(res.x) - y)), float(res.x)


# ---------------------------------------------------------------------------
# relation oracle

@dataclass
class Witness:
    y: np.ndarray
    s: np.ndarray
    xi: np.ndarray

    def as_dict(self):
        return {"y": self.y.tolist(), "s": self.s.tolist(), "xi": self.xi.tolist()}


@dataclass
class RelationQuad:
    vectors: tuple
    verdict: str
    witness: Witness | None = None
    reason: str = ""
    min_gap: float = np.nan
    span_residual: float = np.nan
    analytic: dict | None = None

    def row(self) -> dict:
        out = {}
        for j, v in enumerate(self.vectors):
            for k in range(len(v.x)):
                out[f"v{j}_x{k}"] = float(v.x[k])
            for k in range(len(v.xi)):
                out[f"v{j}_xi{k}"] = float(v.xi[k])
        out["verdict"] = self.verdict
        d = len(self.vectors[0].x)
        y = self.witness.y if self.witness is not None else np.full(d, np.nan)
        for k in range(d):
            out[f"y{k}"] = float(y[k])
        out["min_gap"] = float(self.min_gap)
        out["span_residual"] = float(self.span_residual)
        out["reason"] = self.reason
        return out


def span_residual(xi0, xis) -> float:
    """Relative distance of xi0 from linspan(xis) (Euclidean components)."""
    A = np.asarray(xis, float).T
    c, *_ = np.linalg.lstsq(A, xi0, rcond=None)
    return float(np.linalg.norm(A @ c - xi0) / np.linalg.norm(xi0))


def _is_future_null(m, v: TangentVector, tol=1e-8) -> bool:
    q = float(v.xi @ m.g(v.x) @ v.xi) / float(v.xi @ v.xi)
    return abs(q) < tol and v.xi[0] > 0


class RelationOracle:
    """Geometric oracle for the three-to-one scattering relation between two foliated regions.

    ``box`` bounds the maximal extensions of the geodesics; by default the hull
    of both regions padded by ``pad``.
    """

    def __init__(self, fol_in: Foliation, fol_out: Foliation, box: CoordinateBox | None = None,
                 gap_tol=GAP_TOL, n_brackets=N_BRACKETS, witness_tol=WITNESS_TOL, span_tol=SPAN_TOL,
                 pad=0.5, mode="geometric", analytic_lams=(40, 60, 90, 135)):
        if fol_in.metric is not fol_out.metric:
            raise DomainError("both regions must live on the same metric")
        if mode not in ("geometric", "analytic"):
            raise DomainError("mode must be 'geometric' or 'analytic'")
        self.metric = fol_in.metric
        self.fol_in, self.fol_out = fol_in, fol_out
        if box is None:
            a, b = fol_in.bounding_box(), fol_out.bounding_box()
            box = CoordinateBox(np.minimum(a.lo, b.lo) - pad, np.maximum(a.hi, b.hi) + pad)
        self.box = box
        self.gap_tol, self.n_brackets = gap_tol, n_brackets
        self.witness_tol, self.span_tol = witness_tol, span_tol
        self.mode = mode
        self.analytic_lams = tuple(analytic_lams)
        self._rays: dict = {}
        self._fans: list = []
        self._pair_cache: dict = {}
        m = self.metric
        self._closed_form = (flat_factor(m) is not None or m.n != 2
                             or (isinstance(m, Conformal) and isinstance(m.base, Minkowski)))

    def tolerances(self) -> dict:
        return {"gap_tol": self.gap_tol, "n_brackets": self.n_brackets, "witness_tol": self.witness_tol,
                "span_tol": self.span_tol, "tau_tol": TAU_TOL}

    def ray(self, v: TangentVector) -> _Ray:
        key = (tuple(np.round(v.x, 13)), tuple(np.round(v.xi, 13)))
        r = self._rays.get(key)
        if r is None:
            if len(self._rays) > 4096:
                self._rays.clear()
            r = _Ray(self.metric, v, self.box)
            self._rays[key] = r
        return r

    def _fan(self, y, future, reach):
        """Null fan at y; fans anchored within 1e-9 of y are reused."""
        for a, f, fan in self._fans:
            if f == future and fan.s[-1] >= reach and np.max(np.abs(a - y)) < 1e-9:
                return fan
        fan = get_fan(self.metric, y, future, reach)
        self._fans.append((np.array(y, float), future, fan))
        if len(self._fans) > 32:
            self._fans.pop(0)
        return fan

    def _pairs(self, va, vb, ra, rb, ia, ib):
        """Closest approaches of two forward geodesics, cached per vector pair."""
        key = tuple(np.round(np.concatenate([va.x, va.xi, vb.x, vb.xi]), 13))
        hit = self._pair_cache.get(key)
        if hit is None:
            if len(self._pair_cache) > 1024:
                self._pair_cache.clear()
            hit = _pair_minima(ra, ia, rb, ib, self.n_brackets)
            self._pair_cache[key] = hit
        return hit

    def _box_reach(self, y):
        return _reach(np.array([self.box.lo, self.box.hi]), y)

    def precedes(self, X, y, own=None):
        """x_k << y for many x_k, with status.  ``own`` (n = 2 fans) gives the
        (angle, parameter) of the past null geodesic from y that reaches x_k, if any."""
        X = np.atleast_2d(np.asarray(X, float))
        if self._closed_form:
            return chronological(self.metric, X, np.repeat(y[None], len(X), 0))
        out = np.zeros(len(X), bool)
        early = X[:, 0] < y[0]
        if early.any():
            fan = self._fan(y, False, max(self._box_reach(y), _reach(X[early], y)))
            out[early] = fan.chronological(X[early], own=None if own is None else np.asarray(own)[early])
        return out, np.array(["ok"] * len(X), dtype=object)

    def follows(self, y, Z, own=None, reach=None):
        """y << z_k for many z_k, with status; ``own`` as in ``precedes`` for future geodesics."""
        Z = np.atleast_2d(np.asarray(Z, float))
        if self._closed_form:
            return chronological(self.metric, np.repeat(y[None], len(Z), 0), Z)
        out = np.zeros(len(Z), bool)
        later = Z[:, 0] > y[0]
        if later.any():
            fan = self._fan(y, True, max(reach or 0.0, self._box_reach(y), _reach(Z[later], y)))
            out[later] = fan.chronological(Z[later], own=None if own is None else np.asarray(own)[later])
        return out, np.array(["ok"] * len(Z), dtype=object)

    def _fan_coords(self, y, xi, s, future):
        """(angle, fan parameter) of the null geodesic leaving y with velocity
        +-xi and reaching its base after parameter length |s|."""
        fr = orthonormal_frame(self.metric, y)
        a = np.linalg.solve(fr.T, xi)
        sg = 1.0 if future else -1.0
        return float(np.arctan2(sg * a[2], sg * a[1])), abs(float(s)) * abs(a[0])

    def check_vector(self, v: TangentVector, side: str, label="v"):
        fol = self.fol_in if side == "in" else self.fol_out
        if not fol.contains(v.x[None])[0]:
            where = "source" if side == "in" else "observation"
            raise DomainError(f"{label} must be based in the {where} region")
        if not _is_future_null(self.metric, v):
            raise DomainError(f"{label} is not a future-pointing light vector")

    def _check_inputs(self, v0, vs):
        self.check_vector(v0, "out", "v0")
        for j, v in enumerate(vs, 1):
            self.check_vector(v, "in", f"v{j}")

    def _distinct(self, rays, params) -> bool:
        """Geodesics are the same iff at the witness their tangents are parallel."""
        for j in range(4):
            for k in range(j + 1, 4):
                a = rays[j].velocity(params[j])
                b = rays[k].velocity(params[k])
                if abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)) > 1 - 1e-10:
                    return False
        return True

    def membership(self, v0: TangentVector, v1: TangentVector, v2: TangentVector,
                   v3: TangentVector, rays=None, check=True) -> RelationQuad:
        """Verdict for (v0, v1, v2, v3).  ``rays`` may supply precomputed geodesics
        (None entries are built), parametrized so that s = 0 is the base of v_j."""
        vs = (v1, v2, v3)
        if check:
            self._check_inputs(v0, vs)
        quad = self._geometric(v0, vs, rays)
        if self.mode == "analytic" and quad.verdict != NONMEMBER:
            quad = self._analytic(quad)
        return quad

    def _geometric(self, v0, vs, rays=None) -> RelationQuad:
        V = (v0, *vs)
        rays = [self.ray(v) if rays is None or rays[j] is None else rays[j] for j, v in enumerate(V)]
        iv = [(rays[0].lo, 0.0)] + [(0.0, r.hi) for r in rays[1:]]
        pairs = self._pairs(V[1], V[2], rays[1], rays[2], iv[1], iv[2])
        if not pairs or pairs[0][0] > self.gap_tol:
            gap = pairs[0][0] if pairs else np.inf
            return RelationQuad(V, NONMEMBER, reason="gamma_1 and gamma_2 do not meet", min_gap=gap)
        best = None
        gap_all = np.inf
        for d12, s1, s2 in pairs:
            if d12 > self.gap_tol:
                break
            y = 0.5 * (rays[1].point(s1) + rays[2].point(s2))
            d3, s3 = _closest_on(rays[3], iv[3], y, self.n_brackets)
            d0, s0 = _closest_on(rays[0], iv[0], y, self.n_brackets)
            gap = max(d12, d3, d0)
            gap_all = min(gap_all, gap)
            if gap > self.gap_tol:
                continue
            s, spread = self._joint(rays, iv, np.array([s0, s1, s2, s3]))
            if best is None or spread < best[1]:
                best = (s, spread)
        if best is None:
            return RelationQuad(V, NONMEMBER, reason="no common point of the four geodesics", min_gap=gap_all)
        s, spread = best
        P = np.array([r.point(sj) for r, sj in zip(rays, s)])
        y = P.mean(axis=0)
        xi = np.array([r.velocity(sj) for r, sj in zip(rays, s)])
        wit = Witness(y, s, xi)
        if spread > self.witness_tol:
            return RelationQuad(V, UNKNOWN, wit, reason="common point not resolved to witness tolerance",
                                min_gap=spread)
        res = span_residual(xi[0], xi[1:])
        quad = RelationQuad(V, MEMBER, wit, min_gap=spread, span_residual=res)
        if not self._distinct(rays, s):
            quad.verdict, quad.reason = UNKNOWN, "geodesics not distinct"
            return quad
        if res > self.span_tol:
            quad.verdict, quad.reason = UNKNOWN, "xi_0 outside linspan(xi_1, xi_2, xi_3)"
            return quad
        cut = self._cut_windows(V, y, xi, s)
        if cut is not None:
            quad.verdict, quad.reason = UNKNOWN, cut
        return quad

    def _joint(self, rays, iv, s0):
        lo = np.array([a for a, _ in iv])
        hi = np.array([b for _, b in iv])
        s0 = np.clip(s0, lo, hi)

        def resid(s):
            P = np.array([r.point(sj) for r, sj in zip(rays, s)])
            return (P - P.mean(axis=0)).ravel()

        r0 = resid(s0).reshape(len(rays), -1)
        spread0 = float(np.max(np.linalg.norm(r0, axis=1)))
        if spread0 <= 0.01 * self.witness_tol:
            return s0, spread0

        sol = least_squares(resid, s0, bounds=(lo, hi + 1e-300), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        P = np.array([r.point(sj) for r, sj in zip(rays, sol.x)])
        return sol.x, float(np.max(np.linalg.norm(P - P.mean(axis=0), axis=1)))

    def _cut_windows(self, V, y, xi, s):
        """None when s_j < rho(v_j) (j = 1..3) and s_0 > -rho(v_0); else the reason.

        Equivalently no v_j base point precedes y and y does not precede the v_0 base."""
        X = np.array([v.x for v in V[1:]])
        own_in = own_out = None
        if not self._closed_form:
            own_in = [self._fan_coords(y, xi[j], s[j], False) for j in (1, 2, 3)]
            own_out = [self._fan_coords(y, xi[0], s[0], True)]
        c_in, st_in = self.precedes(X, y, own=own_in)
        c_out, st_out = self.follows(y, V[0].x[None], own=own_out)
        if np.any(st_in == "unknown") or np.any(st_out == "unknown"):
            return "causal data unknown"
        if c_in.any():
            j = int(np.nonzero(c_in)[0][0]) + 1
            return f"gamma_{j} passes its cut point before the common point"
        if c_out[0]:
            return "gamma_0 passes its cut point before reaching the common point"
        return None

    def _analytic(self, quad: RelationQuad) -> RelationQuad:
        from .interaction import InteractionConfig, prepare_interaction, eval_D_semi
        if quad.witness is None:
            return quad
        try:
            cfg = InteractionConfig(self.metric, list(quad.vectors))
            prep = prepare_interaction(cfg, y=quad.witness.y, lam=float(self.analytic_lams[0]))
            est = eval_D_semi(prep, self.analytic_lams)
        except DomainError as exc:
            return RelationQuad(quad.vectors, UNKNOWN, quad.witness, reason=f"analytic data: {exc}",
                                min_gap=quad.min_gap, span_residual=quad.span_residual)
        L, err = est.full_limit, est.full_error
        info = {"limit": L, "error": err, "predicted": est.predicted}
        verdict = MEMBER if abs(L) > max(10 * err, 1e-8) else UNKNOWN
        return RelationQuad(quad.vectors, verdict, quad.witness,
                            reason="" if verdict == MEMBER else "interaction data not resolved from zero",
                            min_gap=quad.min_gap, span_residual=quad.span_residual, analytic=info)


def relation_membership(fol_in: Foliation, fol_out: Foliation, v0, v1, v2, v3,
                        oracle: RelationOracle | None = None, **kw) -> RelationQuad:
    oracle = RelationOracle(fol_in, fol_out, **kw) if oracle is None else oracle
    return oracle.membership(v0, v1, v2, v3)


# ---------------------------------------------------------------------------
# light vectors, third directions and sampling helpers

def null_direction(m: LorentzianMetric, x, w) -> np.ndarray:
    """Future null vector e_0 + sum w_i e_i for a unit spatial direction w."""
    fr = orthonormal_frame(m, x)
    w = np.asarray(w, float)
    return fr[0] + w @ fr[1:]


def light_vector(m: LorentzianMetric, x, w) -> TangentVector:
    x = as_point(x)
    return TangentVector(SpacetimePoint(x), null_direction(m, x, w / np.linalg.norm(w)))


def _span_frame(m, x, a, b, c):
    """Orthonormal (T, S1, S2) of span(a, b, c) w.r.t. g at x; None if degenerate."""
    gm = m.g(x)
    ip = lambda u, v: float(u @ gm @ v)
    T = a + b
    T = T / np.sqrt(-ip(T, T))
    S1 = (a - b) + ip(a - b, T) * T
    S1 = S1 / np.sqrt(ip(S1, S1))
    S2 = c + ip(c, T) * T - ip(c, S1) * S1
    nrm = ip(S2, S2)
    if nrm <= 1e-20 * max(1.0, float(c @ c)):
        return None
    return T, S1, S2 / np.sqrt(nrm)


def third_directions(m: LorentzianMetric, x, xi1, xi2, eta, k=5) -> list:
    """Null xi_3 with eta in linspan(xi_1, xi_2, xi_3), ordered from the middle of the
    arc between xi_1 and xi_2 outwards. Empty when eta lies in span(xi_1, xi_2)."""
    fr = _span_frame(m, x, np.asarray(xi1, float), np.asarray(xi2, float), np.asarray(eta, float))
    if fr is None:
        return []
    T, S1, S2 = fr
    gm = m.g(x)

    def ang(v):
        return np.arctan2(float(v @ gm @ S2), float(v @ gm @ S1))

    p1, p2, pe = ang(xi1), ang(xi2), ang(eta)
    dp = np.angle(np.exp(1j * (p2 - p1)))
    fracs = [0.5]
    for j in range(1, k):
        off = 0.5 * j / k
        fracs += [0.5 - off, 0.5 + off]
    out = []
    for f in fracs[:k]:
        p = p1 + f * dp
        if min(abs(np.angle(np.exp(1j * (p - q)))) for q in (p1, p2, pe)) < 1e-3:
            continue
        out.append(T + np.cos(p) * S1 + np.sin(p) * S2)
    return out


def _back_into(oracle: RelationOracle, x, xi, fol: Foliation, n=81):
    """(light vector over fol on gamma_{x, xi} before x, its ray) or (None, None)."""
    v = TangentVector(SpacetimePoint(x), xi)
    r = oracle.ray(v)
    s = np.linspace(r.lo, 0.0, n)
    inside = fol.contains(r.point(s))
    if not inside.any():
        return None, None
    idx = np.nonzero(inside)[0]
    sm = float(np.median(s[idx]))
    return TangentVector(SpacetimePoint(r.point(sm)), r.velocity(sm)), r.shifted(sm)


def _forward_crossings(ray: _Ray, fol: Foliation, pitch, n_scan=161):
    """Parameters in ray's forward part inside fol, spaced ~pitch in chart distance."""
    speed = float(np.linalg.norm(ray.velocity(0.0)))
    n_scan = max(n_scan, int(np.ceil(2 * ray.hi * speed / pitch)) + 1)
    s = np.linspace(0.0, ray.hi, n_scan)
    inside = fol.contains(ray.point(s))
    if not inside.any():
        return np.zeros(0)
    out = []
    idx = np.nonzero(inside)[0]
    runs = np.split(idx, np.nonzero(np.diff(idx) > 1)[0] + 1)
    for run in runs:
        a = s[max(run[0] - 1, 0)]
        b = s[min(run[-1] + 1, n_scan - 1)]
        speed = float(np.linalg.norm(ray.velocity(0.5 * (a + b))))
        k = max(int(np.ceil((b - a) * speed / pitch)), 1)
        cand = np.linspace(a, b, k + 1)
        out.append(cand[fol.contains(ray.point(cand))])
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# sampled sets

@dataclass
class EarliestObservationSet:
    provenance: str
    anchor: object
    points: np.ndarray
    vectors: np.ndarray
    pitch: float
    chart: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    def features(self) -> np.ndarray:
        """Base point and spatial direction xi^i / xi^0 (chart coordinates of T Omega_out)."""
        if self.empty:
            return np.zeros((0, 2 * self.points.shape[1] - 1 if self.points.ndim == 2 else 0))
        return np.column_stack([self.points, self.vectors[:, 1:] / self.vectors[:, :1]])

    def hausdorff(self, other: "EarliestObservationSet") -> float:
        if self.empty and other.empty:
            return 0.0
        if self.empty or other.empty:
            return np.inf
        A, B = self.features(), other.features()
        return max(directed_hausdorff(A, B)[0], directed_hausdorff(B, A)[0])

    def rows(self) -> list:
        out = []
        for p, v in zip(self.points, self.vectors):
            row = {"provenance": self.provenance, "pitch": float(self.pitch)}
            row.update({f"x{k}": float(p[k]) for k in range(len(p))})
            row.update({f"xi{k}": float(v[k]) for k in range(len(v))})
            out.append(row)
        return out


def _empty_set(provenance, anchor, d, pitch, **meta):
    z = np.zeros((0, d))
    return EarliestObservationSet(provenance, anchor, z, z.copy(), pitch, z.copy(), dict(meta))


def _generator_directions(n, count):
    return _sphere(n, count)


def _angular_window(oracle, x, fol_out, n_scan=None, n_s=400):
    """Spatial directions at x whose future ray enters fol_out, and the farthest crossing.

    All scan rays are integrated in one batch on a common parameter grid."""
    m = oracle.metric
    d = m.dim
    if n_scan is None:
        n_scan = 720 if m.n == 2 else 4000
    W = _generator_directions(m.n, n_scan)
    fr = orthonormal_frame(m, x)
    XI = fr[0] + W @ fr[1:]
    K = oracle.box
    s = np.linspace(0.0, _reach(np.array([K.lo, K.hi]), x), n_s)
    st = np.concatenate([np.repeat(x[None], len(W), 0), XI], axis=1)
    P = trace_states(m, st, s, rtol=1e-9, atol=1e-11)[..., :d]
    inbox = np.logical_and.accumulate(K.contains(P), axis=1)
    cand = inbox & fol_out.bounding_box(pad=1e-9).contains(P)
    ins = np.zeros(cand.shape, bool)
    if cand.any():
        ins[cand] = fol_out.contains(P[cand])
    hit = ins.any(axis=1)
    far = float(np.max(np.linalg.norm(P[ins] - x, axis=1))) if hit.any() else 0.0
    return W, hit, far


def _refine_directions(n, W, hit, step):
    """Direction grid with angular step `step` covering the hit window (plus one scan cell)."""
    if n == 2:
        th = np.arctan2(W[:, 1], W[:, 0])
        dth = 2 * np.pi / len(W)
        keep = hit | np.roll(hit, 1) | np.roll(hit, -1)
        cells = th[keep]
        k = max(int(np.ceil(dth / step)), 1)
        fine = (cells[:, None] + np.linspace(-0.5, 0.5, k, endpoint=False)[None] * dth).ravel()
        fine = np.unique(np.round(np.mod(fine, 2 * np.pi), 12))
        return np.column_stack([np.cos(fine), np.sin(fine)])
    count = int(np.ceil(4 * np.pi / step ** 2))
    Wf = _sphere(n, count)
    tree = cKDTree(W[hit | _near_hits(W, hit)])
    d, _ = tree.query(Wf)
    return Wf[d < 2.5 * np.sqrt(4 * np.pi / len(W))]


def _near_hits(W, hit):
    if not hit.any():
        return hit
    d, _ = cKDTree(W[hit]).query(W)
    return d < 2.0 * np.sqrt(4 * np.pi / len(W))


def earliest_set_direct(x, fol_out: Foliation, pitch=0.05, oracle: RelationOracle | None = None,
                        fol_in: Foliation | None = None, n_scan=None, budget=200_000,
                        check_hypothesis=True) -> EarliestObservationSet:
    """E(x): light vectors beta_{x,xi}(s) over Omega_out with s up to the cut rho(x, xi)."""
    m = fol_out.metric
    x = as_point(x)
    if oracle is None or not oracle.box.contains(x):
        oracle = RelationOracle(fol_in if fol_in is not None else fol_out, fol_out,
                                box=_box_around(fol_out, x))
    bb = fol_out.bounding_box()
    reach = _reach(np.array([bb.lo, bb.hi]), x)
    if check_hypothesis:
        c, _ = oracle.follows(x, fol_out.bottom(), reach=reach)
        if c.any():
            raise DomainError("x precedes the bottom of the observation region")
    W, hit, far = _angular_window(oracle, x, fol_out, n_scan)
    if not hit.any():
        return _empty_set("direct", x, m.dim, pitch)
    pts, vecs, gen, own = [], [], [], []
    for g, (w, r, s) in enumerate(_generators(oracle, x, fol_out, pitch, W, hit, far, budget)):
        pts.append(r.point(s))
        vecs.append(r.velocity(s))
        gen.append(np.full(s.size, g))
        own.append(np.column_stack([np.full(s.size, np.arctan2(w[-1], w[0])), s]))
        if sum(len(p) for p in pts) > budget:
            raise DomainError("sampling budget exhausted; increase the pitch")
    if not pts:
        return _empty_set("direct", x, m.dim, pitch)
    P, Vv, G = np.concatenate(pts), np.concatenate(vecs), np.concatenate(gen)
    opt = ~oracle.follows(x, P, own=np.concatenate(own) if m.n == 2 else None, reach=reach)[0]
    P, Vv, G = P[opt], Vv[opt], G[opt]
    t, a, _ = fol_out.inverse(P) if len(P) else (np.zeros(0), np.zeros((0, m.n)), None)
    return EarliestObservationSet("direct", x, P, Vv, pitch, np.column_stack([t, a]),
                                  {"generator": G, "n_cut": int((~opt).sum())})


def _generators(oracle, x, fol_out, pitch, W, hit, far, cap=20_000, rounds=10):
    """(w, ray, crossing parameters) for light rays from x over fol_out.

    Directions start on a grid of angular step pitch / far around the scan hits.
    For n = 2 the grid is then bisected wherever neighbouring rays cross
    fol_out more than 1.5 pitch apart, or one of them misses it.
    """
    m = oracle.metric
    step = pitch / max(far, pitch)

    def make(w):
        r = oracle.ray(TangentVector(SpacetimePoint(x), null_direction(m, x, w)))
        return (w, r, _forward_crossings(r, fol_out, pitch))

    gens = [make(w) for w in _refine_directions(m.n, W, hit, step)]
    if m.n == 2:
        ang = lambda g: float(np.arctan2(g[0][1], g[0][0]))
        gens.sort(key=ang)
        for _ in range(rounds):
            new = []
            for a, b in zip(gens[:-1], gens[1:]):
                ta, tb = ang(a), ang(b)
                if tb - ta < step / 64 or tb - ta > 4 * step:
                    continue
                ha, hb = a[2].size > 0, b[2].size > 0
                if ha != hb or (ha and _crossing_gap(a, b) > 1.5 * pitch):
                    mid = 0.5 * (ta + tb)
                    new.append(np.array([np.cos(mid), np.sin(mid)]))
            if not new or len(gens) + len(new) > cap:
                break
            gens = sorted(gens + [make(w) for w in new], key=ang)
    return [g for g in gens if g[2].size]


def _crossing_gap(a, b):
    Pa, Pb = a[1].point(a[2]), b[1].point(b[2])
    return max(float(np.linalg.norm(Pa[0] - Pb[0])), float(np.linalg.norm(Pa[-1] - Pb[-1])))


def _box_around(fol_out, x, pad=0.5):
    b = fol_out.bounding_box()
    return CoordinateBox(np.minimum(b.lo, x) - pad, np.maximum(b.hi, x) + pad)


# ---------------------------------------------------------------------------
# conical pieces

@dataclass
class ConicalPiece:
    anchors: tuple
    intersections: np.ndarray
    points: np.ndarray
    vectors: np.ndarray
    witness: np.ndarray
    pitch: float
    queries: int = 0
    verdicts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def local_rank(self, k=12, rel=0.1) -> np.ndarray:
        """Local PCA rank of the sampled vectors (chart features) at each sample."""
        if len(self.points) < k + 1:
            return np.zeros(len(self.points), int)
        Fm = np.column_stack([self.points, self.vectors[:, 1:] / self.vectors[:, :1]])
        _, idx = cKDTree(Fm).query(Fm, k)
        ranks = np.empty(len(Fm), int)
        for i, nb in enumerate(idx):
            Z = Fm[nb] - Fm[nb].mean(axis=0)
            sv = np.linalg.svd(Z, compute_uv=False)
            ranks[i] = int(np.sum(sv > rel * sv[0])) if sv[0] > 0 else 0
        return ranks


def intersection_points(oracle: RelationOracle, v1, v2) -> list:
    """Common points of the forward geodesics of v1 and v2 (the finite set of the upper bound)."""
    r1, r2 = oracle.ray(v1), oracle.ray(v2)
    out = []
    for d, s1, s2 in oracle._pairs(v1, v2, r1, r2, (0.0, r1.hi), (0.0, r2.hi)):
        if d <= oracle.gap_tol:
            out.append((0.5 * (r1.point(s1) + r2.point(s2)), s1, s2))
    return out


def conical_piece_sample(v1: TangentVector, v2: TangentVector, fol_in: Foliation, fol_out: Foliation,
                         budget: int = 4000, pitch: float = 0.05, oracle: RelationOracle | None = None,
                         gap_policy: str = "strict", n_scan: int | None = None) -> ConicalPiece:
    """Sampled CP(v1, v2): light vectors v0 over Omega_out with (v0, v1, v2, v3) in the relation.

    Candidates v0 = beta_{x, eta}(s) are proposed over the finitely many common
    points x of the two forward geodesics (no other v0 can be in the piece); each
    is kept only if the oracle accepts it together with a third vector v3 whose
    direction completes the span at x. ``gap_policy`` decides whether ``unknown``
    verdicts count as members (``permissive``) or not (``strict``).
    """
    if gap_policy not in ("strict", "permissive"):
        raise DomainError("gap_policy must be 'strict' or 'permissive'")
    oracle = RelationOracle(fol_in, fol_out) if oracle is None else oracle
    m = oracle.metric
    d = m.dim
    empty = ConicalPiece((v1, v2), np.zeros((0, d)), np.zeros((0, d)), np.zeros((0, d)), np.zeros((0, d)), pitch)
    oracle.check_vector(v1, "in", "v1")
    oracle.check_vector(v2, "in", "v2")
    if budget <= 0:
        return empty
    F = intersection_points(oracle, v1, v2)
    empty.intersections = np.array([f[0] for f in F]).reshape(-1, d)
    if not F:
        return empty
    accept = {MEMBER} if gap_policy == "strict" else {MEMBER, UNKNOWN}
    pts, vecs, wits = [], [], []
    counts = {MEMBER: 0, NONMEMBER: 0, UNKNOWN: 0}
    queries = 0
    cur_pitch = pitch
    for x, s1, s2 in F:
        xi1 = oracle.ray(v1).velocity(s1)
        xi2 = oracle.ray(v2).velocity(s2)
        W, hit, far = _angular_window(oracle, x, fol_out, n_scan)
        if not hit.any():
            continue
        while True:
            gens = _generators(oracle, x, fol_out, cur_pitch, W, hit, far)
            total = sum(g[2].size for g in gens)
            if total <= budget - queries or total == 0:
                break
            cur_pitch *= np.sqrt(total / max(budget - queries, 1)) * 1.05
        for _, r, s in gens:
            eta = r.velocity(0.0)
            v3 = None
            for xi3 in third_directions(m, x, xi1, xi2, eta):
                v3, r3 = _back_into(oracle, x, xi3, fol_in)
                if v3 is not None:
                    break
            if v3 is None:
                continue
            for sj in s:
                r0 = r.shifted(sj)
                v0 = TangentVector(SpacetimePoint(r0.point(0.0)), r0.velocity(0.0))
                q = oracle.membership(v0, v1, v2, v3, rays=[r0, None, None, r3], check=False)
                queries += 1
                counts[q.verdict] += 1
                if q.verdict in accept:
                    pts.append(v0.x)
                    vecs.append(v0.xi)
                    wits.append(q.witness.y if q.witness is not None else x)
    P = np.array(pts).reshape(-1, d)
    return ConicalPiece((v1, v2), empty.intersections, P, np.array(vecs).reshape(-1, d),
                        np.array(wits).reshape(-1, d), cur_pitch, queries, counts)


def upper_bound_defect(piece: ConicalPiece, oracle: RelationOracle) -> float:
    """max over samples of the distance from the F-set to the backward geodesic of the sample."""
    if len(piece) == 0:
        return 0.0
    worst = 0.0
    for p, v in zip(piece.points, piece.vectors):
        r = oracle.ray(TangentVector(SpacetimePoint(p), v))
        best = min(_closest_on(r, (r.lo, 0.0), x)[0] for x in piece.intersections)
        worst = max(worst, best)
    return worst


# ---------------------------------------------------------------------------
# relation-derived earliest sets

def _vertex(points, vectors, m, oracle: RelationOracle) -> np.ndarray:
    """Least-squares common point of the backward geodesics of the sampled vectors."""
    if m.is_flat:
        U = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        A = np.zeros((m.dim, m.dim))
        b = np.zeros(m.dim)
        for p, u in zip(points, U):
            Pm = np.eye(m.dim) - np.outer(u, u)
            A += Pm
            b += Pm @ p
        return np.linalg.solve(A, b)
    y = np.mean(points, axis=0)
    rays = [oracle.ray(TangentVector(SpacetimePoint(p), v)) for p, v in zip(points, vectors)]
    for _ in range(4):
        feet = np.array([r.point(_closest_on(r, (r.lo, 0.0), y)[1]) for r in rays])
        y = feet.mean(axis=0)
    return y


def _no_earlier(points, m, fol_out: Foliation):
    """Mask of samples with no other sample chronologically before them inside Omega_out."""
    N = len(points)
    keep = np.ones(N, bool)
    if N == 0:
        return keep
    box = fol_out.bounding_box()
    flat = m.flat_on_box(box.lo, box.hi) or flat_factor(m) is not None
    for i in range(N):
        before = points[:, 0] < points[i, 0] - 1e-14
        if not before.any():
            continue
        X = points[before]
        if flat:
            D = points[i] - X
            g0 = m.g(points[i])
            q = -np.einsum("ki,ij,kj->k", D, g0, D)
            rel = (D[:, 0] > 0) & (np.sqrt(np.maximum(q, 0.0)) > TAU_TOL)
        else:
            rel, _ = chronological(m, X, np.repeat(points[i][None], len(X), 0))
        keep[i] = not rel.any()
    return keep


def _limit_direction_filter(points, vectors, pitch, tol=0.3):
    """Keep (z, zeta) when a step of one pitch along zeta (either sign) stays on pi(E~)."""
    if len(points) < 2:
        return np.zeros(len(points), bool)
    tree = cKDTree(points)
    U = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    ok = np.zeros(len(points), bool)
    for sgn in (1.0, -1.0):
        d, _ = tree.query(points + sgn * pitch * U)
        ok |= d < (1.0 + tol) * pitch * 0.5 + 1e-12
    # a sample counts as its own neighbour only when the step vanishes; require a genuine neighbour
    return ok


def earliest_set_from_relation(v1: TangentVector, v2: TangentVector, fol_in: Foliation, fol_out: Foliation,
                               budget: int = 4000, pitch: float = 0.05, oracle: RelationOracle | None = None,
                               companions: Sequence | None = None, gap_policy: str = "strict",
                               min_rank_fraction: float = 0.5) -> EarliestObservationSet:
    """E(v1, v2) from sampled conical pieces, the no-earlier-point filter and the limit-direction rule.

    Companion pairs (v~, w~) default to (v2, v1), for which the piece pair
    CP(v1, v~) and CP(v2, w~) coincide; further pairs are verified sample by sample.
    """
    oracle = RelationOracle(fol_in, fol_out) if oracle is None else oracle
    m = oracle.metric
    d = m.dim
    anchor = (v1, v2)
    if companions is None:
        companions = [(v2, v1)]
    pts, vecs, wits = [], [], []
    used_pitch = pitch
    pieces = []
    for vt, wt in companions:
        P = conical_piece_sample(v1, vt, fol_in, fol_out, budget, pitch, oracle, gap_policy)
        used_pitch = max(used_pitch, P.pitch)
        if len(P) == 0:
            continue
        keep = np.ones(len(P), bool)
        if not (vt is v2 and wt is v1):
            keep = _in_piece(P, v2, wt, oracle, fol_in, gap_policy)
        keep &= _full_rank_groups(P, m.n, min_rank_fraction)
        sub = ConicalPiece(P.anchors, P.intersections, P.points[keep], P.vectors[keep], P.witness[keep], P.pitch)
        if len(sub) == 0:
            continue
        pieces.append(len(sub))
        pts.append(sub.points)
        vecs.append(sub.vectors)
        wits.append(sub.witness)
    if not pts:
        z = np.zeros((0, d))
        return _empty_set("relation", anchor, d, used_pitch, cone_points=z, cone_vectors=z,
                          cone_witness=z, witness=z, n_cone=0, n_tilde=0, pieces=pieces)
    C_pts, C_vec, C_wit = np.concatenate(pts), np.concatenate(vecs), np.concatenate(wits)
    early = _no_earlier(C_pts, m, fol_out)
    Et_pts, Et_vec = C_pts[early], C_vec[early]
    lim = _limit_direction_filter(Et_pts, Et_vec, used_pitch)
    P, Vv = Et_pts[lim], Et_vec[lim]
    t, a, _ = fol_out.inverse(P) if len(P) else (np.zeros(0), np.zeros((0, m.n)), None)
    meta = {"cone_points": C_pts, "cone_vectors": C_vec, "cone_witness": C_wit,
            "witness": C_wit[early][lim], "n_cone": len(C_pts),
            "n_tilde": int(early.sum()), "pieces": pieces}
    return EarliestObservationSet("relation", anchor, P, Vv, used_pitch, np.column_stack([t, a]), meta)


def witness_groups(W, tol=1e-5) -> np.ndarray:
    """Cluster labels of witness points closer than tol."""
    labels = -np.ones(len(W), int)
    k = 0
    for i in range(len(W)):
        if labels[i] >= 0:
            continue
        near = (labels < 0) & (np.max(np.abs(W - W[i]), axis=1) < tol)
        labels[near] = k
        k += 1
    return labels


def _full_rank_groups(P: ConicalPiece, n, min_fraction):
    """Samples whose witness group is locally an n-dimensional family (one cone piece each)."""
    keep = np.zeros(len(P), bool)
    lab = witness_groups(P.witness)
    for g in np.unique(lab):
        idx = np.nonzero(lab == g)[0]
        sub = ConicalPiece(P.anchors, P.intersections, P.points[idx], P.vectors[idx], P.witness[idx], P.pitch)
        if np.mean(sub.local_rank() == n) >= min_fraction:
            keep[idx] = True
    return keep


def _in_piece(P: ConicalPiece, v, w, oracle, fol_in, gap_policy):
    """Which samples of P are also in CP(v, w)."""
    accept = {MEMBER} if gap_policy == "strict" else {MEMBER, UNKNOWN}
    m = oracle.metric
    F = intersection_points(oracle, v, w)
    keep = np.zeros(len(P), bool)
    if not F:
        return keep
    rv, rw = oracle.ray(v), oracle.ray(w)
    for i, (p, u) in enumerate(zip(P.points, P.vectors)):
        r = oracle.ray(TangentVector(SpacetimePoint(p), u))
        for x, s1, s2 in F:
            dist, s0 = _closest_on(r, (r.lo, 0.0), x)
            if dist > oracle.gap_tol:
                continue
            eta = r.velocity(s0)
            for xi3 in third_directions(m, x, rv.velocity(s1), rw.velocity(s2), eta):
                v3, r3 = _back_into(oracle, x, xi3, fol_in)
                if v3 is None:
                    continue
                q = oracle.membership(TangentVector(SpacetimePoint(p), u), v, w, v3, rays=[r, None, None, r3],
                                      check=False)
                if q.verdict in accept:
                    keep[i] = True
                break
            if keep[i]:
                break
    return keep


def earliest_set_vertex(E: EarliestObservationSet, oracle: RelationOracle) -> np.ndarray:
    """Common point of the backward geodesics through the samples of a relation-derived set."""
    if E.empty:
        raise DomainError("empty set has no vertex")
    return _vertex(E.points, E.vectors, oracle.metric, oracle)


# ---------------------------------------------------------------------------
# Minkowski test battery

def minkowski_battery(fol_in: Foliation, fol_out: Foliation, n_quads=200, seed=0, shift=0.3,
                      max_tries=None):
    """Quads with known ground truth in flat space.

    A random common point y between the regions is joined to Omega_in by three
    backward light rays and to Omega_out by one forward ray (for n = 3 the third
    direction is chosen in the span so that xi_0 lies in linspan(xi_1, xi_2, xi_3)).
    Flat space has no cut points, so these quads meet the sufficient condition.
    Every other quad has v3 translated off y and is flagged uncertified.
    Returns (quads, certified flags).
    """
    m = fol_in.metric
    if not m.is_flat:
        raise DomainError("the battery is defined for flat metrics")
    rng = _rng(seed)
    Pin = fol_in.sample(5, 1, 8)
    Pout = fol_out.sample(5, 1, 8)
    quads, certified = [], []
    tries = 0
    max_tries = 200 * n_quads if max_tries is None else max_tries
    n_free = 3 if m.n == 2 else 2
    while len(quads) < n_quads:
        tries += 1
        if tries > max_tries:
            raise DomainError("could not build the battery in this geometry")
        a = Pin[rng.integers(len(Pin))]
        b = Pout[rng.integers(len(Pout))]
        y = a + rng.uniform(0.2, 0.8) * (b - a) + 0.3 * rng.normal(size=m.dim) * np.r_[0.0, np.ones(m.n)]
        z = _hit(y, fol_out, rng, +1)
        if z is None:
            continue
        xi0 = (z - y) / (z[0] - y[0])
        src = [_hit(y, fol_in, rng, -1) for _ in range(n_free)]
        if any(p is None for p in src):
            continue
        xis = [(y - p) / (y[0] - p[0]) for p in src]
        if m.n >= 3:
            p3 = None
            for xi3 in third_directions(m, y, xis[0], xis[1], xi0, k=9):
                xi3 = xi3 / xi3[0]
                p3 = _first_inside(y, -xi3, fol_in)
                if p3 is not None:
                    break
            if p3 is None:
                continue
            src.append(p3)
            xis.append(xi3)
            if span_residual(xi0, xis) > 1e-9:
                continue
        if np.linalg.matrix_rank(np.array(xis), tol=1e-6) < 3:
            continue
        vs = [TangentVector(SpacetimePoint(p), xi) for p, xi in zip(src, xis)]
        v0 = TangentVector(SpacetimePoint(z), xi0)
        good = len(quads) % 2 == 0
        if not good:
            off = np.zeros(m.dim)
            off[1:] = rng.normal(size=m.n)
            off *= shift / np.linalg.norm(off)
            p3 = vs[2].x + off
            if not fol_in.contains(p3[None])[0]:
                continue
            vs[2] = TangentVector(SpacetimePoint(p3), vs[2].xi)
        quads.append((v0, *vs))
        certified.append(good)
    return quads, np.array(certified)


def _hit(y, fol: Foliation, rng, sign, attempts=12):
    """Point of fol on a random light ray from y (future if sign > 0), or None."""
    c = fol.path(np.array(0.0))
    for _ in range(attempts):
        w = (c[1:] - y[1:]) * sign
        w = w / np.linalg.norm(w) + 0.25 * rng.normal(size=len(w))
        w /= np.linalg.norm(w)
        p = _first_inside(y, sign * np.r_[1.0, w], fol, rng)
        if p is not None:
            return p
    return None


def _first_inside(y, d, fol: Foliation, rng=None, n=200, reach=12.0):
    """A point of fol on the segment y + s d, 0 < s <= reach (random if rng is given)."""
    s = np.linspace(0.0, reach, n + 1)[1:]
    P = y + s[:, None] * d
    ins = np.nonzero(fol.contains(P))[0]
    if ins.size == 0:
        return None
    k = ins[rng.integers(ins.size)] if rng is not None else ins[ins.size // 2]
    return P[k]
