"""Fermi coordinates along a null geodesic.

The chart is F(s, y) = gamma(s) + Y - 1/2 Gamma(gamma(s))[Y, Y] with
Y = sum_a y^a E_a(s), where (gamma', E_1 = N, E_2, ..., E_n) is a parallel
null frame: <gamma', N> = 1, <N, N> = 0, E_alpha orthonormal and orthogonal to
gamma' and N.  The quadratic correction removes the first derivatives of the
chart metric on gamma.
"""
from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .manifold import LorentzianMetric, TangentVector, null_frame, DomainError
from .geodesics import Geodesic, integrate_geodesic, TOL_GEO, ATOL_GEO

TOL_FERMI = 1e-7


def normal_form(n: int) -> np.ndarray:
    G = np.zeros((n + 1, n + 1))
    G[0, 1] = G[1, 0] = 1.0
    G[2:, 2:] = np.eye(n - 1)
    return G


def _transport_solution(m: LorentzianMetric, x0, v0, frame0, s_lo, s_hi, rtol=TOL_GEO, atol=ATOL_GEO):
    """Dense solutions (backward, forward) of geodesic + parallel transport of frame rows."""
    d = m.dim
    r = frame0.shape[0]

    def rhs(_, y):
        x, u = y[:d], y[d:2 * d]
        E = y[2 * d:].reshape(r, d)
        gam = m.christoffel(x)
        acc = -np.einsum("ijk,j,k->i", gam, u, u)
        dE = -np.einsum("ijk,j,ak->ai", gam, u, E)
        return np.concatenate([u, acc, dE.ravel()])

    y0 = np.concatenate([x0, v0, np.asarray(frame0, float).ravel()])
    sols = []
    for end in (s_lo, s_hi):
        if end == 0:
            sols.append(None)
            continue
        sol = solve_ivp(rhs, (0.0, end), y0, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
        if sol.status < 0:
            raise DomainError(f"transport integration failed: {sol.message}")
        sols.append(sol)
    return sols


def _eval_two_sided(sols, y0, s):
    s = np.atleast_1d(np.asarray(s, float))
    out = np.empty((s.size, y0.size))
    neg = s < 0
    if np.any(neg):
        out[neg] = sols[0].sol(s[neg]).T
    if np.any(~neg):
        out[~neg] = sols[1].sol(s[~neg]).T if sols[1] is not None else y0
    return out


class FrameField:
    """Parallel-transported frame along a geodesic, callable on s arrays."""

    def __init__(self, m, x0, v0, frame0, s_range):
        self.metric = m
        self.d = m.dim
        self.r = np.asarray(frame0).shape[0]
        self._y0 = np.concatenate([x0, v0, np.asarray(frame0, float).ravel()])
        if m.is_flat:
            self._sols = None
        else:
            self._sols = _transport_solution(m, x0, v0, np.asarray(frame0, float),
                                             min(s_range[0], 0.0), max(s_range[1], 0.0))

    def state(self, s):
        s = np.atleast_1d(np.asarray(s, float))
        d = self.d
        if self._sols is None:
            out = np.repeat(self._y0[None], s.size, axis=0)
            out[:, :d] += s[:, None] * self._y0[d:2 * d]
            return out
        return _eval_two_sided(self._sols, self._y0, s)

    def __call__(self, s):
        st = self.state(s)
        return st[:, 2 * self.d:].reshape(-1, self.r, self.d)


def parallel_transport(m: LorentzianMetric, frame0, geo: Geodesic) -> FrameField:
    frame0 = np.atleast_2d(np.asarray(frame0, float))
    if np.linalg.matrix_rank(frame0) < frame0.shape[0]:
        raise DomainError("frame vectors are linearly dependent")
    return FrameField(m, geo.initial.x, geo.initial.xi, frame0, (geo.s_min, geo.s_max))


class FermiChart:
    """Fermi chart along gamma_v on [a, b] with tube half-width delta."""

    def __init__(self, m: LorentzianMetric, v: TangentVector, s_range, delta: float = 0.2,
                 pad: float = 0.5, n_nodes: int = 1601):
        self.metric = m
        self.n = m.n
        self.d = m.dim
        self.a, self.b = float(s_range[0]), float(s_range[1])
        self.delta = float(delta)
        self.v = v
        fr = null_frame(m, v.x, v.xi)
        self.frame0 = fr  # rows L, N, E_2.. at s = 0
        lo, hi = min(self.a - pad, 0.0), max(self.b + pad, 0.0)
        self.s_lo, self.s_hi = lo, hi
        self.flat = m.is_flat
        d = self.d
        if self.flat:
            self._x0 = np.asarray(v.x, float)
            self._L = fr[0]
            self._E = fr[1:]
            return
        field = FrameField(m, v.x, v.xi, fr[1:], (lo, hi))
        self.nodes = np.linspace(lo, hi, n_nodes)
        st = field.state(self.nodes)
        gam = m.christoffel(st[:, :d])
        self._sx = CubicSpline(self.nodes, st[:, :d])
        self._sv = CubicSpline(self.nodes, st[:, d:2 * d])
        self._sE = CubicSpline(self.nodes, st[:, 2 * d:].reshape(-1, self.n, d))
        self._sG = CubicSpline(self.nodes, gam)
        self._sdG = self._sG.derivative()

    # -- frame data along gamma ------------------------------------------
    def gamma(self, s):
        s = np.asarray(s, float)
        if self.flat:
            return self._x0 + s[..., None] * self._L
        return self._sx(s)

    def gamma_dot(self, s):
        s = np.asarray(s, float)
        if self.flat:
            return np.broadcast_to(self._L, s.shape + (self.d,))
        return self._sv(s)

    def frame(self, s):
        """E_a(s), shape (..., n, d); E_1 = N."""
        s = np.asarray(s, float)
        if self.flat:
            return np.broadcast_to(self._E, s.shape + self._E.shape)
        return self._sE(s)

    def _gam(self, s):
        s = np.asarray(s, float)
        if self.flat:
            return np.zeros(s.shape + (self.d,) * 3)
        return self._sG(s)

    # -- chart maps --------------------------------------------------------
    def forward(self, s, y):
        """Chart map (s, y') -> x; s shape (...), y shape (..., n)."""
        s = np.asarray(s, float)
        y = np.asarray(y, float)
        E = self.frame(s)
        Y = np.einsum("...a,...ai->...i", y, E)
        x = self.gamma(s) + Y
        if not self.flat:
            x = x - 0.5 * np.einsum("...ijk,...j,...k->...i", self._gam(s), Y, Y)
        return x

    def jacobian(self, s, y):
        """dF/d(s, y'), shape (..., d, d) with columns (d/ds, d/dy^1, ..., d/dy^n)."""
        s = np.asarray(s, float)
        y = np.asarray(y, float)
        E = self.frame(s)
        Y = np.einsum("...a,...ai->...i", y, E)
        J = np.empty(s.shape + (self.d, self.d))
        if self.flat:
            J[..., :, 0] = self.gamma_dot(s)
            J[..., :, 1:] = np.swapaxes(E, -1, -2)
            return J
        gam = self._gam(s)
        u = self.gamma_dot(s)
        Edot = -np.einsum("...ijk,...j,...ak->...ai", gam, u, E)
        Ydot = np.einsum("...a,...ai->...i", y, Edot)
        dgam = self._sdG(s)
        J[..., :, 0] = (u + Ydot - 0.5 * np.einsum("...ijk,...j,...k->...i", dgam, Y, Y)
                        - np.einsum("...ijk,...j,...k->...i", gam, Y, Ydot))
        J[..., :, 1:] = np.swapaxes(E - np.einsum("...ijk,...aj,...k->...ai", gam, E, Y), -1, -2)
        return J

    def chart_metric(self, s, y):
        J = self.jacobian(s, y)
        x = self.forward(s, y)
        return np.einsum("...ia,...ij,...jb->...ab", J, self.metric.g(x), J)

    def inverse(self, x, iters=30, tol=1e-12):
        """x -> (s, y'); returns arrays s (...), y (..., n)."""
        x = np.asarray(x, float)
        shp = x.shape[:-1]
        X = x.reshape(-1, self.d)
        if self.flat:
            M = np.column_stack([self._L, self._E.T])
            sol = np.linalg.solve(M, (X - self._x0).T).T
            return sol[:, 0].reshape(shp), sol[:, 1:].reshape(shp + (self.n,))
        g = self.metric.g
        # initial s from <x - gamma(s), N(s)> = 0, then dual components
        s = np.zeros(len(X))
        for _ in range(8):
            N = self.frame(s)[:, 0]
            gm = g(self.gamma(s))
            r = np.einsum("ki,kij,kj->k", X - self.gamma(s), gm, N)
            s = np.clip(s + r, self.s_lo, self.s_hi)
        E = self.frame(s)
        gm = g(self.gamma(s))
        D = X - self.gamma(s)
        # y^1 from <D, gamma'> (since <N, gamma'> = 1), y^alpha from <D, E_alpha>
        y = np.empty((len(X), self.n))
        y[:, 0] = np.einsum("ki,kij,kj->k", D, gm, self.gamma_dot(s))
        if self.n > 1:
            y[:, 1:] = np.einsum("ki,kij,kaj->ka", D, gm, E[:, 1:])
        for _ in range(iters):
            F = self.forward(s, y) - X
            err = np.max(np.abs(F)) if F.size else 0.0
            if err < tol:
                break
            J = self.jacobian(s, y)
            step = np.linalg.solve(J, -F[..., None])[..., 0]
            s = np.clip(s + step[:, 0], self.s_lo, self.s_hi)
            y = y + step[:, 1:]
        return s.reshape(shp), y.reshape(shp + (self.n,))

    # -- diagnostics ----------------------------------------------------------
    def normal_form_error(self, s_samples=None) -> float:
        if s_samples is None:
            s_samples = np.linspace(self.a, self.b, 41)
        s_samples = np.asarray(s_samples, float)
        G = self.chart_metric(s_samples, np.zeros(s_samples.shape + (self.n,)))
        return float(np.max(np.abs(G - normal_form(self.n))))

    def first_derivative_error(self, s_samples=None, h=1e-4) -> float:
        """max |d_{y^i} G_jk| on gamma by centred differences."""
        if s_samples is None:
            s_samples = np.linspace(self.a, self.b, 21)
        s_samples = np.asarray(s_samples, float)
        worst = 0.0
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = h
            yp = np.broadcast_to(e, s_samples.shape + (self.n,))
            dG = (self.chart_metric(s_samples, yp) - self.chart_metric(s_samples, -yp)) / (2 * h)
            worst = max(worst, float(np.max(np.abs(dG))))
        return worst

    def roundtrip_error(self, n_samples=400, rng=None) -> float:
        rng = np.random.default_rng(0) if rng is None else rng
        s = rng.uniform(self.a, self.b, n_samples)
        dirs = rng.normal(size=(n_samples, self.n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        y = dirs * (self.delta * rng.uniform(0, 1, n_samples))[:, None]
        s2, y2 = self.inverse(self.forward(s, y))
        return float(max(np.max(np.abs(s2 - s)), np.max(np.abs(y2 - y))))

    def D_matrix(self, s, h=2e-3):
        """D_jk(s) = 1/4 d^2 G^{11} / dy^j dy^k on gamma, shape (..., n, n)."""
        s = np.atleast_1d(np.asarray(s, float))
        n = self.n
        if self.flat:
            return np.zeros(s.shape + (n, n))

        def g11(y):
            G = self.chart_metric(s, np.broadcast_to(y, s.shape + (n,)))
            return np.linalg.inv(G)[..., 1, 1]

        D = np.empty(s.shape + (n, n))
        c0 = g11(np.zeros(n))
        for j in range(n):
            ej = np.zeros(n)
            ej[j] = h
            # fourth-order second derivative
            D[..., j, j] = (-g11(2 * ej) + 16 * g11(ej) - 30 * c0 + 16 * g11(-ej) - g11(-2 * ej)) / (12 * h * h)
            for k in range(j + 1, n):
                ek = np.zeros(n)
                ek[k] = h
                D[..., j, k] = D[..., k, j] = (g11(ej + ek) - g11(ej - ek) - g11(-ej + ek) + g11(-ej - ek)) / (4 * h * h)
        return 0.25 * D


def build_fermi_chart(m: LorentzianMetric, v: TangentVector, s_range, delta: float = 0.2,
                      check=True, min_delta=1e-3) -> FermiChart:
    """Build a chart, halving delta until the sampled round trip is the identity."""
    while True:
        chart = FermiChart(m, v, s_range, delta)
        if not check or chart.flat:
            return chart
        if chart.roundtrip_error(200) < 1e-9:
            return chart
        if delta / 2 < min_delta:
            raise DomainError(f"chart not injective for any delta >= {min_delta}")
        delta /= 2
