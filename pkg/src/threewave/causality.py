"""Causal relations, time separation, cut times and earliest observation functions.

Time separation is evaluated in closed form on flat and constant-conformal
metrics and by multi-start shooting otherwise.  Timelike initial vectors at x
are written V = p*l(w) + q*N(w) in an orthonormal frame (e_0, e_1..e_n) at x,
with l = e_0 + w.e and N = (e_0 - w.e)/2, so <V,V> = -2pq and the proper time of
the geodesic s -> exp_x(sV), s in [0,1], is sqrt(2pq).  Shooting is done in the
variables (p, log q, a) with w = a/|a|, which keeps every iterate timelike.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, least_squares

from .manifold import (LorentzianMetric, Minkowski, Conformal, TangentVector, as_point,
                       DomainError, classify_vector, null_frame, project_null)
from .geodesics import (Geodesic, CoordinateBox, flow_states, integrate_geodesic, trace_states,
                        exit_time, geodesic_rhs, TOL_GEO, ATOL_GEO)

TAU_TOL = 1e-7
BISECT_DEPTH = 60
# shooting resolves q to about this fraction of p; proper times below
# sqrt(2 p q) at this level are indistinguishable from a null connection
Q_FLOOR = 1e-10

CHRONOLOGICAL = "chronological"
CAUSAL = "causal-not-chronological"
NONE = "none"
UNKNOWN = "unknown"


# ---------------------------------------------------------------------------
# helpers

def flat_factor(m: LorentzianMetric):
    """Return c when m = c * eta with constant c, else None."""
    if isinstance(m, Minkowski):
        return 1.0
    if isinstance(m, Conformal) and m.c.is_constant and isinstance(m.base, Minkowski):
        return float(m.c.value(np.zeros(m.dim)))
    return None


def orthonormal_frame(m: LorentzianMetric, x) -> np.ndarray:
    """Rows e_0 (future unit timelike, normal to the x^0 slice), e_1..e_n."""
    x = np.asarray(x, dtype=float)
    gm = m.g(x)
    gi = np.linalg.inv(gm)
    d = m.dim
    e0 = -gi[:, 0] / np.sqrt(-gi[0, 0])
    frame = [e0]
    for k in range(1, d):
        u = np.eye(d)[k].copy()
        u = u + (u @ gm @ e0) * e0
        for e in frame[1:]:
            u = u - (u @ gm @ e) * e
        frame.append(u / np.sqrt(u @ gm @ u))
    return np.array(frame)


def _flat_tau(c, X, Y):
    D = np.asarray(Y, float) - np.asarray(X, float)
    q = D[..., 0] ** 2 - np.sum(D[..., 1:] ** 2, axis=-1)
    scale = np.maximum(np.sum(D * D, axis=-1), 1e-300)
    timelike = (q > 1e-14 * scale) & (D[..., 0] > 0)
    return np.where(timelike, np.sqrt(c * np.maximum(q, 0.0)), 0.0), D, q, scale


# ---------------------------------------------------------------------------
# shooting

def _params_to_V(frames, P):
    """P (..., n+2) = (p, log q, a) -> V (..., d) in coordinates."""
    p = P[..., 0]
    q = np.exp(P[..., 1])
    a = P[..., 2:]
    w = a / np.linalg.norm(a, axis=-1, keepdims=True)
    comp = np.concatenate([(p + 0.5 * q)[..., None], (p - 0.5 * q)[..., None] * w], axis=-1)
    return np.einsum("...a,...ai->...i", comp, frames)


DEFAULT_STARTS = ((0.0, None), (0.0, 0.3), (0.3, None), (-0.3, None), (0.7, None), (-0.7, None))


def _initial_params(frames, gm, X, Y, starts=DEFAULT_STARTS):
    """Flat-space guesses for (p, log q, a); one row per (rotation, q fraction)."""
    D = Y - X
    # frame components: D = c^a e_a  ->  c = eta^{ab} <D, e_b>
    comp = np.einsum("ki,kij,kaj->ka", D, gm, frames)
    comp[:, 0] *= -1.0
    t = comp[:, 0]
    sp = comp[:, 1:]
    r = np.linalg.norm(sp, axis=1)
    w = sp / np.maximum(r, 1e-300)[:, None]
    # purely temporal separation: any unit direction works, the spatial weight is zero
    w[r < 1e-300, 0] = 1.0
    out = []
    n = sp.shape[1]
    for rot, qf in starts:
        wr = w.copy()
        if rot != 0.0 and n >= 2:
            c, s = np.cos(rot), np.sin(rot)
            w0, w1 = wr[:, 0].copy(), wr[:, 1].copy()
            wr[:, 0], wr[:, 1] = c * w0 - s * w1, s * w0 + c * w1
        p = np.maximum(0.5 * (t + r), 1e-6)
        q = t - r
        if qf is not None:
            q = qf * p
        q = np.where(q > 1e-6 * p, q, 1e-3 * p)
        out.append(np.concatenate([p[:, None], np.log(q)[:, None], wr], axis=1))
    return np.stack(out, axis=1)  # (k, S, n+2)


def shoot_timelike(m: LorentzianMetric, X, Y, starts=None, max_iter=16, tol=1e-9):
    """Batched search for timelike geodesics exp_x(V) = y.

    Returns (tau, found, null_limit) per pair where ``found`` marks a converged
    timelike solution with q above the floor and ``null_limit`` marks starts
    that ran into the null cone.  Among several converged starts the largest
    proper time is kept.
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    k, d = X.shape
    frames = np.array([orthonormal_frame(m, x) for x in X])
    gm = m.g(X)
    if starts is None:
        starts = _initial_params(frames, gm, X, Y)
    S = starts.shape[1]
    P = starts.reshape(k * S, d + 1).copy()
    Fr = np.repeat(frames, S, axis=0)
    Xr = np.repeat(X, S, axis=0)
    Yr = np.repeat(Y, S, axis=0)
    active = np.ones(k * S, bool)
    conv = np.zeros(k * S, bool)
    nulllim = np.zeros(k * S, bool)
    h = 1e-6
    scale = np.maximum(1.0, np.linalg.norm(Yr - Xr, axis=1))
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        Pa = P[idx]
        # base + forward differences in each parameter
        Pall = np.repeat(Pa[:, None, :], d + 2, axis=1)
        for j in range(d + 1):
            Pall[:, j + 1, j] += h
        V = _params_to_V(np.repeat(Fr[idx][:, None], d + 2, axis=1), Pall)
        st = np.concatenate([np.repeat(Xr[idx][:, None, :], d + 2, axis=1), V], axis=-1)
        end = flow_states(m, st.reshape(-1, 2 * d), 1.0, rtol=1e-9, atol=1e-11).reshape(idx.size, d + 2, 2 * d)[..., :d]
        a = Pa[:, 2:]
        F = np.concatenate([end[:, 0] - Yr[idx], (np.sum(a * a, axis=1) - 1.0)[:, None]], axis=1)
        J = np.empty((idx.size, d + 1, d + 1))
        J[:, :d, :] = np.transpose(end[:, 1:] - end[:, :1], (0, 2, 1)) / h
        J[:, d, :] = 0.0
        J[:, d, 2:] = 2 * a
        res = np.linalg.norm(F, axis=1)
        done = res < tol * scale[idx]
        conv[idx[done]] = True
        active[idx[done]] = False
        go = ~done
        if not np.any(go):
            continue
        try:
            step = -np.linalg.solve(J[go], F[go][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -np.array([np.linalg.lstsq(Jk, Fk, rcond=None)[0] for Jk, Fk in zip(J[go], F[go])])
        # damping
        p = Pa[go, 0]
        fac = np.ones(step.shape[0])
        fac = np.minimum(fac, 0.5 * p / np.maximum(np.abs(step[:, 0]), 1e-300))
        fac = np.minimum(fac, 4.0 / np.maximum(np.abs(step[:, 1]), 1e-300))
        fac = np.minimum(fac, 0.5 / np.maximum(np.linalg.norm(step[:, 2:], axis=1), 1e-300))
        Pn = Pa[go] + fac[:, None] * step
        P[idx[go]] = Pn
        # ran into the null cone: q below the floor
        low = Pn[:, 1] < np.log(Q_FLOOR * np.maximum(Pn[:, 0], 1e-300))
        nulllim[idx[go][low]] = True
        active[idx[go][low]] = False
        bad = ~np.all(np.isfinite(Pn), axis=1) | (Pn[:, 0] <= 0)
        active[idx[go][bad]] = False
    p = P[:, 0]
    q = np.exp(P[:, 1])
    tau_all = np.where(conv & (q > Q_FLOOR * p), np.sqrt(2 * p * q), 0.0)
    tau_all = tau_all.reshape(k, S)
    found = (conv & (q > Q_FLOOR * p)).reshape(k, S)
    return tau_all.max(axis=1), found.any(axis=1), nulllim.reshape(k, S).any(axis=1), P.reshape(k, S, d + 1)


REFINE_CELLS = 6


class NullFan:
    """Null geodesics from x in all directions (n = 2), traced on an (angle, s) grid.

    Used for arrival-time computations: for a target y, the earliest arrival
    time on the vertical line through y' is the smallest x^0 at which a null
    geodesic from x reaches that line, and y lies in I^+(x) exactly when y^0
    exceeds it.  The past-directed fan gives the analogous latest departure.
    """

    def __init__(self, m: LorentzianMetric, x, future: bool = True, n_rays: int = 720,
                 s_max: float = 10.0, n_s: int = 400):
        if m.n != 2:
            raise DomainError("null fans are implemented for n = 2")
        self.metric = m
        self.x = np.asarray(x, float)
        self.future = future
        self.frame = orthonormal_frame(m, self.x)
        self.theta = np.linspace(0.0, 2 * np.pi, n_rays, endpoint=False)
        self.s = np.linspace(0.0, s_max, n_s)
        st = np.concatenate([np.repeat(self.x[None], n_rays, 0), self.directions(self.theta)], axis=1)
        self.states = trace_states(m, st, self.s, rtol=1e-9, atol=1e-11)

    def directions(self, theta):
        e0, e1, e2 = self.frame
        sgn = 1.0 if self.future else -1.0
        th = np.asarray(theta, float)[..., None]
        return sgn * e0 + np.cos(th) * e1 + np.sin(th) * e2

    def _cell_size(self):
        if not hasattr(self, "_hmax"):
            P = self.states[..., 1:3]
            e1 = np.linalg.norm(np.roll(P, -1, axis=0) - P, axis=-1).max()
            e2 = np.linalg.norm(np.diff(P, axis=1), axis=-1).max()
            self._hmax = 1.01 * (e1 + e2)
        return self._hmax

    def _cells_at(self, target):
        """Cells whose bounding box contains the spatial target (binned lookup)."""
        if not hasattr(self, "_bins"):
            P = self.states[..., 1:3]
            Q = np.roll(P, -1, axis=0)
            corners = np.stack([P[:, :-1], P[:, 1:], Q[:, :-1], Q[:, 1:]])
            lo = corners.min(axis=0).reshape(-1, 2) - 1e-9
            hi = corners.max(axis=0).reshape(-1, 2) + 1e-9
            size = max(float(np.median(np.max(hi - lo, axis=1))) * 2.0, 1e-6)
            b0 = np.floor(lo / size).astype(np.int64)
            b1 = np.floor(hi / size).astype(np.int64)
            wx = b1[:, 0] - b0[:, 0] + 1
            cnt = wx * (b1[:, 1] - b0[:, 1] + 1)
            cell = np.repeat(np.arange(len(cnt)), cnt)
            off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            keys = self._bin_key(b0[cell, 0] + off % wx[cell], b0[cell, 1] + off // wx[cell])
            order = np.argsort(keys, kind="stable")
            self._bins = (size, keys[order], cell[order])
        size, keys, cell = self._bins
        b = np.floor(target / size).astype(np.int64)
        key = self._bin_key(b[0], b[1])
        a, z = np.searchsorted(keys, key), np.searchsorted(keys, key, side="right")
        return np.divmod(cell[a:z], self.states.shape[1] - 1)

    @staticmethod
    def _bin_key(bx, by):
        return (np.asarray(bx, np.int64) + (1 << 30)) * (1 << 31) + (np.asarray(by, np.int64) + (1 << 30))

    def _hits(self, target):
        """Grid cells whose image contains the spatial target.

        Rows are (theta, s, t, spread): the interpolated hit and the spread of
        the corner times, which bounds the interpolation error of t.
        """
        P = self.states[..., 1:3]
        T = self.states[..., 0]
        k, ns = T.shape
        ii, jj = self._cells_at(np.asarray(target, float))
        if ii.size == 0:
            return np.zeros((0, 4))
        in_ = (ii + 1) % k
        dth = self.theta[1] - self.theta[0]
        ds = self.s[1] - self.s[0]
        cr = lambda a, b: a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
        out = []
        tri = [((ii, jj), (in_, jj), (ii, jj + 1), 0.0, 0.0, 1.0, 1.0),
               ((in_, jj + 1), (ii, jj + 1), (in_, jj), 1.0, 1.0, -1.0, -1.0)]
        for a, b, c, oth, os_, sth, ss in tri:
            A, B, C = P[a], P[b], P[c]
            AB, AC, AP = B - A, C - A, target - A
            den = cr(AB, AC)
            ok = np.abs(den) > 1e-300
            with np.errstate(divide="ignore", invalid="ignore"):
                u = cr(AP, AC) / den
                w = cr(AB, AP) / den
            eps = 1e-9
            inside = ok & (u >= -eps) & (w >= -eps) & (u + w <= 1 + eps)
            if not np.any(inside):
                continue
            u, w = u[inside], w[inside]
            th = self.theta[ii[inside]] + (oth + sth * u) * dth
            sv = self.s[jj[inside]] + (os_ + ss * w) * ds
            TA, TB, TC = T[a][inside], T[b][inside], T[c][inside]
            spread = np.maximum(np.maximum(TA, TB), TC) - np.minimum(np.minimum(TA, TB), TC)
            out.append(np.column_stack([th, sv, TA + u * (TB - TA) + w * (TC - TA), spread]))
        return np.concatenate(out) if out else np.zeros((0, 4))

    def refine(self, theta, s, target, iters=6):
        """Batched Newton on (theta, s) so that gamma_theta(s) lies over the spatial target."""
        th = np.atleast_1d(np.asarray(theta, float)).copy()
        sv = np.atleast_1d(np.asarray(s, float)).copy()
        k = th.size
        m = self.metric
        h = 1e-6
        X = np.repeat(self.x[None], 2 * k, 0)
        for _ in range(iters):
            dirs = self.directions(np.concatenate([th, th + h]))
            st = np.concatenate([X, np.concatenate([sv, sv])[:, None] * dirs], axis=1)
            end = flow_states(m, st, 1.0, rtol=1e-11, atol=1e-13)
            F = end[:k, 1:3] - target
            J = np.stack([(end[k:, 1:3] - end[:k, 1:3]) / h, end[:k, 4:6] / sv[:, None]], axis=2)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            good = np.abs(det) > 1e-14
            step = np.zeros((k, 2))
            step[good] = -np.linalg.solve(J[good], F[good][..., None])[..., 0]
            step = np.clip(step, -0.05, 0.05)
            th += step[:, 0]
            sv = np.maximum(sv + step[:, 1], 1e-9)
            if np.all(np.abs(step) < 1e-13 * np.maximum(1.0, sv[:, None])):
                break
        st = np.concatenate([self.x[None].repeat(k, 0), sv[:, None] * self.directions(th)], axis=1)
        end = flow_states(m, st, 1.0, rtol=1e-11, atol=1e-13)
        ok = np.linalg.norm(end[:, 1:3] - target, axis=1) < 1e-8
        return th, sv, end[:, 0], ok

    def arrival(self, target, t_ref=None, window=2e-3):
        """Earliest (future fan) or latest (past fan) x^0 on the line through target.

        Returns nan when no null geodesic of the fan reaches the line.  Cells
        whose interpolated time is far from the extremum (or from t_ref) are
        not refined.
        """
        target = np.asarray(target, float)[-2:]
        hits = self._hits(target)
        if len(hits) == 0:
            return np.nan
        sgn = 1.0 if self.future else -1.0
        ts = hits[:, 2] * sgn
        best = np.min(ts + hits[:, 3])
        if t_ref is not None:
            best = min(best, sgn * t_ref)
        cand = hits[ts - hits[:, 3] <= best + window]
        _, _, t2, ok = self.refine(cand[:, 0], cand[:, 1], target)
        res = np.where(ok, t2, cand[:, 2]) * sgn
        return sgn * res.min()

    def chronological(self, Y, thr=1e-7, own=None, window=2e-3):
        """y in I^+(x) for the future fan, y in I^-(x) for the past fan.

        ``own`` optionally gives (theta, s) per query when y is known to lie on
        the fan ray theta at parameter s; hits within two cells of it are that
        ray itself and are skipped, which avoids most refinements.
        """
        Y = np.atleast_2d(np.asarray(Y, float))
        out = np.zeros(len(Y), bool)
        sgn = 1.0 if self.future else -1.0
        dth = self.theta[1] - self.theta[0]
        ds = self.s[1] - self.s[0]
        for k, y in enumerate(Y):
            hits = self._hits(y[1:])
            if len(hits) == 0:
                continue
            if own is not None:
                dt = np.angle(np.exp(1j * (hits[:, 0] - own[k][0])))
                mine = (np.abs(dt) < 2 * dth) & (np.abs(hits[:, 1] - own[k][1]) < 2 * ds)
                hits = hits[~mine]
                if len(hits) == 0:
                    continue
            gap = sgn * (y[0] - hits[:, 2])  # > 0 means the hit arrives first
            tol = window + hits[:, 3]
            if np.any(gap > tol):
                out[k] = True
                continue
            near = gap > -tol
            amb = hits[near]
            if len(amb) == 0:
                continue
            # only the cells most likely to arrive first are refined
            amb = amb[np.argsort(-gap[near])[:REFINE_CELLS]]
            _, _, t2, ok = self.refine(amb[:, 0], amb[:, 1], y[1:])
            t2 = np.where(ok, t2, amb[:, 2])
            out[k] = bool(np.any(sgn * (y[0] - t2) > thr))
        return out


def time_separation_many(m: LorentzianMetric, X, Y, starts=None):
    """tau for many pairs; returns (tau, status) with status in {'ok', 'unknown'}."""
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    c = flat_factor(m)
    if c is not None:
        tau, *_ = _flat_tau(c, X, Y)
        return tau, np.array(["ok"] * len(tau), dtype=object)
    tau, found, nulllim, _ = shoot_timelike(m, X, Y, starts=starts)
    status = np.where(found | nulllim | (Y[:, 0] <= X[:, 0]), "ok", "unknown").astype(object)
    return tau, status


def time_separation(m: LorentzianMetric, x, y, K: CoordinateBox | None = None) -> float:
    x, y = as_point(x), as_point(y)
    if K is not None and not (K.contains(x) and K.contains(y)):
        raise DomainError("points outside the box")
    tau, status = time_separation_many(m, x[None], y[None])
    if status[0] == "unknown":
        raise UnknownVerdict("time separation solver did not converge")
    return float(tau[0])


class UnknownVerdict(RuntimeError):
    pass


def tau_threshold(m: LorentzianMetric, x, y) -> float:
    """Smallest proper time the evaluator separates from a null connection."""
    if flat_factor(m) is not None:
        return TAU_TOL
    D = np.asarray(y, float) - np.asarray(x, float)
    return max(TAU_TOL, 4.0 * np.sqrt(2 * Q_FLOOR) * float(np.linalg.norm(D)))


# ---------------------------------------------------------------------------
# causal relation

@dataclass
class CausalVerdict:
    relation: str
    tau: float = 0.0
    witness: np.ndarray | None = None


def null_connection(m: LorentzianMetric, x, y, guess=None, tol=1e-8):
    """Look for a null geodesic from x to y. Returns (found, initial vector, parameter 1)."""
    x, y = as_point(x), as_point(y)
    c = flat_factor(m)
    D = y - x
    if c is not None:
        q = D[0] ** 2 - np.sum(D[1:] ** 2)
        ok = abs(q) <= 1e-10 * max(np.dot(D, D), 1e-300) and D[0] >= 0
        return ok, D.copy()
    fr = orthonormal_frame(m, x)
    gm = m.g(x)
    comp = fr @ gm @ D
    comp[0] *= -1
    t = comp[0]
    r = np.linalg.norm(comp[1:])
    a0 = comp[1:] / max(r, 1e-300) if guess is None else guess
    p0 = max(0.5 * (t + r), 1e-6)

    def resid(P):
        w = P[1:] / np.linalg.norm(P[1:])
        V = P[0] * (fr[0] + w @ fr[1:])
        st = np.concatenate([x, V])
        end = flow_states(m, st[None], 1.0)[0, : m.dim]
        return np.concatenate([end - y, [np.dot(P[1:], P[1:]) - 1.0]])

    sol = least_squares(resid, np.concatenate([[p0], a0]), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    ok = np.linalg.norm(sol.fun) < tol * max(1.0, np.linalg.norm(D))
    w = sol.x[1:] / np.linalg.norm(sol.x[1:])
    return bool(ok), sol.x[0] * (fr[0] + w @ fr[1:])


_FANS: dict = {}


def get_fan(m: LorentzianMetric, x, future=True, s_max=10.0) -> NullFan:
    """Cached null fan; a cached fan with a longer reach is reused."""
    key = (id(m), tuple(np.round(np.asarray(x, float), 14)), bool(future))
    fan = _FANS.get(key)
    if fan is None or fan.s[-1] < s_max:
        if len(_FANS) > 64:
            _FANS.clear()
        fan = NullFan(m, x, future=future, s_max=max(s_max, 1.0))
        _FANS[key] = fan
    return fan


def _reach(m, X, Y):
    """Affine reach (in fan normalization) needed to cover the targets."""
    D = np.atleast_2d(Y) - np.atleast_2d(X)
    return 1.5 * float(np.max(np.abs(D[:, 0]) + np.linalg.norm(D[:, 1:], axis=1))) + 0.5


def chronological(m: LorentzianMetric, X, Y):
    """Vectorized x << y.  Returns (verdict bool array, status object array)."""
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    X, Y = np.broadcast_arrays(X, Y)
    c = flat_factor(m)
    if c is None and isinstance(m, Conformal) and isinstance(m.base, Minkowski):
        c = 1.0  # chronology is conformally invariant
    ok = np.array(["ok"] * len(X), dtype=object)
    if c is not None:
        tau, *_ = _flat_tau(1.0, X, Y)
        return tau > TAU_TOL, ok
    out = np.zeros(len(X), bool)
    later = Y[:, 0] > X[:, 0]
    if m.n == 2:
        keys = {}
        for k in np.nonzero(later)[0]:
            keys.setdefault(tuple(X[k]), []).append(k)
        for key, idx in keys.items():
            fan = get_fan(m, np.array(key), True, _reach(m, X[idx], Y[idx]))
            out[idx] = fan.chronological(Y[idx])
        return out, ok
    tau, status = time_separation_many(m, X, Y)
    thr = np.array([tau_threshold(m, p, q) for p, q in zip(X, Y)])
    return (tau > thr) & later, status


def causal_relation(m: LorentzianMetric, x, y, K: CoordinateBox | None = None) -> CausalVerdict:
    x, y = as_point(x), as_point(y)
    if K is not None and not (K.contains(x) and K.contains(y)):
        raise DomainError("points outside the box")
    chrono, status = chronological(m, x[None], y[None])
    if status[0] == "unknown":
        return CausalVerdict(UNKNOWN)
    if chrono[0]:
        tau, st = time_separation_many(m, x[None], y[None])
        return CausalVerdict(CHRONOLOGICAL, float(tau[0]))
    if np.allclose(x, y):
        return CausalVerdict(CAUSAL, 0.0)
    ok, V = null_connection(m, x, y)
    if ok:
        return CausalVerdict(CAUSAL, 0.0, witness=V)
    return CausalVerdict(NONE, 0.0)


def chronological_in_region(m: LorentzianMetric, P, Q, lo=None, hi=None):
    """p << q through curves inside a region; exact closed form where m is flat there."""
    if lo is not None and flat_factor(m) is None and m.flat_on_box(lo, hi):
        tau, *_ = _flat_tau(1.0, np.atleast_2d(P), np.atleast_2d(Q))
        return tau > TAU_TOL
    return chronological(m, P, Q)[0]


# ---------------------------------------------------------------------------
# cut function

@dataclass
class CutResult:
    rho: float
    no_cut_within_box: bool
    exit_time: float
    conjugate: float
    consistent: bool
    status: str = "ok"


def _fan_coords(m, v: TangentVector):
    """(theta, scale) with v = scale * l(theta) in the fan normalization at pi(v)."""
    fr = orthonormal_frame(m, v.x)
    gm = m.g(v.x)
    comp = fr @ gm @ v.xi
    comp[0] *= -1.0
    future = comp[0] > 0
    alpha = abs(comp[0])
    return float(np.arctan2(comp[2], comp[1])), alpha, bool(future)


def optimizing_predicate(m: LorentzianMetric, v: TangentVector, s_values, geo: Geodesic | None = None,
                         fast=False):
    """For each s: True when gamma_v on [0, s] is still optimizing (tau(pi(v), gamma_v(s)) = 0).

    Works for past-pointing v as well (then the relation is y << pi(v)).
    """
    s_values = np.atleast_1d(np.asarray(s_values, float))
    if flat_factor(m) is not None:
        return np.ones(s_values.size, bool)
    if geo is None:
        geo = integrate_geodesic(m, v, (0.0, float(s_values.max())))
    pts = geo.point(s_values)
    if m.n == 2:
        th, alpha, future = _fan_coords(m, geo.initial)
        fan = get_fan(m, geo.initial.x, future, alpha * float(s_values.max()) * 1.05 + 0.5)
        own = [(th, alpha * s) for s in s_values] if fast else None
        return ~fan.chronological(pts, own=own)
    X = np.repeat(geo.initial.x[None], len(s_values), axis=0)
    if geo.initial.xi[0] > 0:
        tau, status = time_separation_many(m, X, pts)
    else:
        tau, status = time_separation_many(m, pts, X)
    if np.any(status == "unknown"):
        raise UnknownVerdict("time separation solver did not converge")
    thr = np.array([tau_threshold(m, v.x, p) for p in pts])
    return tau <= thr


def tau_along(m: LorentzianMetric, v: TangentVector, s_values, geo: Geodesic | None = None):
    """tau(pi(v), gamma_v(s)) and thresholds for an array of s (shooting)."""
    s_values = np.atleast_1d(np.asarray(s_values, float))
    if geo is None:
        geo = integrate_geodesic(m, v, (0.0, float(s_values.max())))
    pts = geo.point(s_values)
    X = np.repeat(v.x[None], len(s_values), axis=0)
    tau, status = time_separation_many(m, X, pts)
    thr = np.array([tau_threshold(m, v.x, p) for p in pts])
    return tau, thr, status


def jacobi_conjugate_time(m: LorentzianMetric, v: TangentVector, s_max: float):
    """First conjugate point of the null geodesic gamma_v on (0, s_max], +inf if none.

    Jacobi fields with J(0)=0, J'(0)=E_a for a screen frame E_a are integrated
    alongside the geodesic and the parallel-transported screen; conjugacy is a
    sign change of det <J_a, E_b>.
    """
    if m.is_flat:
        return np.inf
    d = m.dim
    fr = null_frame(m, v.x, v.xi)
    E = fr[2:]
    r = E.shape[0]

    def rhs(_, y):
        x, u = y[:d], y[d:2 * d]
        J = y[2 * d:2 * d + r * d].reshape(r, d)
        Jp = y[2 * d + r * d:2 * d + 2 * r * d].reshape(r, d)
        Ee = y[2 * d + 2 * r * d:].reshape(r, d)
        gam = m.christoffel(x)
        dgam = m.dchristoffel(x)
        acc = -np.einsum("ijk,j,k->i", gam, u, u)
        Jpp = (-2 * np.einsum("ijk,j,ak->ai", gam, u, Jp)
               - np.einsum("mijk,am,j,k->ai", dgam, J, u, u))
        dE = -np.einsum("ijk,j,ak->ai", gam, u, Ee)
        return np.concatenate([u, acc, Jp.ravel(), Jpp.ravel(), dE.ravel()])

    y0 = np.concatenate([v.x, v.xi, np.zeros(r * d), E.ravel(), E.ravel()])
    sol = solve_ivp(rhs, (0, s_max), y0, method="DOP853", rtol=1e-10, atol=1e-12, dense_output=True)

    def detb(s):
        y = sol.sol(s)
        x = y[:d]
        J = y[2 * d:2 * d + r * d].reshape(r, d)
        Ee = y[2 * d + 2 * r * d:].reshape(r, d)
        return np.linalg.det(J @ m.g(x) @ Ee.T)

    ss = np.linspace(0, s_max, 401)[1:]
    vals = np.array([detb(s) for s in ss])
    sign0 = np.sign(vals[0])
    for i in range(1, len(ss)):
        if np.sign(vals[i]) != sign0:
            return brentq(detb, ss[i - 1], ss[i], xtol=1e-12)
    return np.inf


def renull(m: LorentzianMetric, v: TangentVector, tol=1e-6) -> TangentVector:
    """Re-project a nearly null vector (e.g. the end state of an integration) onto the cone."""
    u = v.xi / np.linalg.norm(v.xi)
    q = float(u @ m.g(v.x) @ u)
    if abs(q) > tol:
        raise DomainError("vector is not null")
    return TangentVector(v.base, project_null(m, v.x, v.xi, future=bool(v.xi[0] > 0)))


def cut_time(m: LorentzianMetric, v: TangentVector, K: CoordinateBox, depth=BISECT_DEPTH,
             s_tol=1e-6, check_conjugate=True) -> CutResult:
    """rho(v) by bisection on the optimality predicate over (0, R(v)].

    v may be future or past pointing; for past-pointing v the cut of the
    reversed (past-directed) geodesic is returned.
    """
    v = renull(m, v)
    geo = integrate_geodesic(m, v, (0.0, 1.0))
    R = exit_time(geo, K)
    geo = integrate_geodesic(m, v, (0.0, R))
    conj = jacobi_conjugate_time(m, geo.initial, R) if check_conjugate else np.inf
    if flat_factor(m) is not None:
        return CutResult(R, True, R, conj, True)
    try:
        if optimizing_predicate(m, geo.initial, [R], geo, fast=True)[0]:
            return CutResult(R, True, R, conj, bool(R <= conj + 1e-6))
        a, b = 0.0, R
        for _ in range(depth):
            c = 0.5 * (a + b)
            if optimizing_predicate(m, geo.initial, [c], geo, fast=True)[0]:
                a = c
            else:
                b = c
            if b - a < s_tol:
                break
    except UnknownVerdict:
        return CutResult(np.nan, False, R, conj, False, status="unknown")
    rho = 0.5 * (a + b)
    return CutResult(rho, False, R, conj, bool(rho <= conj + 10 * s_tol))


def is_optimizing(m: LorentzianMetric, v: TangentVector, s: float, K: CoordinateBox | None = None) -> bool:
    if s <= 0 or flat_factor(m) is not None:
        return True
    return bool(optimizing_predicate(m, v, [s])[0])


# ---------------------------------------------------------------------------
# paths and earliest observation functions

class TimelikePath:
    """Future-pointing timelike path mu: [-1, 1] -> M."""

    def __init__(self, func: Callable, tangent: Callable | None = None, metric: LorentzianMetric | None = None):
        self.func = func
        self._tangent = tangent
        if metric is not None:
            s = np.linspace(-1, 1, 21)
            t = self.tangent(s)
            q = np.einsum("ki,kij,kj->k", t, metric.g(self(s)), t)
            if np.any(q >= 0) or np.any(t[:, 0] <= 0):
                raise DomainError("path is not future timelike")

    def __call__(self, s):
        return np.asarray(self.func(np.asarray(s, float)), float)

    def tangent(self, s):
        s = np.asarray(s, float)
        if self._tangent is not None:
            return np.asarray(self._tangent(s), float)
        h = 1e-6
        return (self(s + h) - self(s - h)) / (2 * h)

    @classmethod
    def vertical(cls, xs, t0=0.0, speed=1.0, metric=None):
        xs = np.asarray(xs, float)

        def f(s):
            s = np.asarray(s, float)
            return np.concatenate([(t0 + speed * s)[..., None], np.broadcast_to(xs, s.shape + xs.shape)], axis=-1)

        def tan(s):
            s = np.asarray(s, float)
            return np.concatenate([np.full(s.shape + (1,), speed), np.zeros(s.shape + xs.shape)], axis=-1)

        return cls(f, tan, metric)


def earliest_obs_many(m: LorentzianMetric, mu: TimelikePath, X, direction="future", depth=BISECT_DEPTH, s_tol=1e-9):
    """Vectorized f^+ (or f^-) for many points by simultaneous bisection."""
    X = np.atleast_2d(np.asarray(X, float))
    k = len(X)

    def chrono(xs, ss):
        pts = mu(ss)
        if direction == "future":
            return chronological(m, xs, pts)[0]
        return chronological(m, pts, xs)[0]

    lo = -np.ones(k)
    hi = np.ones(k)
    c_lo = chrono(X, lo)
    c_hi = chrono(X, hi)
    out = np.empty(k)
    if direction == "future":
        out[:] = 1.0
        out[c_lo] = -1.0
        todo = c_hi & ~c_lo
    else:
        out[:] = -1.0
        out[c_hi] = 1.0
        todo = c_lo & ~c_hi
    a, b = lo[todo].copy(), hi[todo].copy()
    Xt = X[todo]
    for _ in range(depth):
        if a.size == 0 or np.max(b - a) < s_tol:
            break
        c = 0.5 * (a + b)
        r = chrono(Xt, c)
        if direction == "future":
            b = np.where(r, c, b)
            a = np.where(r, a, c)
        else:
            a = np.where(r, c, a)
            b = np.where(r, b, c)
    out[todo] = 0.5 * (a + b)
    return out


def earliest_obs(m: LorentzianMetric, mu: TimelikePath, x, direction="future") -> float:
    return float(earliest_obs_many(m, mu, as_point(x)[None], direction)[0])

