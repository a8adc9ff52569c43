"""Leapfrog solver for box_g u (+ u^m) = f in 1+1 and 1+2 dimensions, and the m-fold
linearization harness.

Metrics are Minkowski or c * Minkowski. For g = c eta the unknown v = c^{(n-1)/4} u solves
    (box_eta + q) v + c^p v^m = c^{(n+3)/4} f,   p = (n + 3 - m (n - 1)) / 4,
    q = -c^{(1-n)/4} box_eta c^{(n-1)/4},
so every stencil is flat. Signature (-, +, ..., +): box_eta = -d_t^2 + Laplacian.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .manifold import LorentzianMetric, Minkowski, Conformal, DomainError, ScalarField

CFL_MAX = 0.9
BLOWUP = 1e6


class SourceSupportError(DomainError):
    """The source does not vanish where the time stepping starts."""


@dataclass(frozen=True)
class WaveGrid:
    """Uniform grid on [t0, t1] x prod [lo_i, hi_i]; dt from the CFL number dt sqrt(n)/dx."""

    t0: float
    t1: float
    lo: tuple
    hi: tuple
    dx: float
    cfl: float = 0.5

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or len(self.lo) not in (1, 2):
            raise DomainError("the solver supports 1 or 2 space dimensions")
        if not 0 < self.cfl <= CFL_MAX:
            raise DomainError(f"CFL number {self.cfl} outside (0, {CFL_MAX}]")
        if self.t1 <= self.t0 or self.dx <= 0:
            raise DomainError("empty grid")

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def nt(self) -> int:
        return int(math.ceil((self.t1 - self.t0) / (self.cfl * self.dx / math.sqrt(self.n)))) + 1

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / (self.nt - 1)

    @property
    def courant(self) -> float:
        return self.dt * math.sqrt(self.n) / self.dx

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt)

    @property
    def axes(self) -> list:
        out = []
        for a, b in zip(self.lo, self.hi):
            k = int(round((b - a) / self.dx))
            out.append(a + self.dx * np.arange(k + 1))
        return out

    @property
    def shape(self) -> tuple:
        return (self.nt,) + tuple(len(a) for a in self.axes)

    def points(self, k=None) -> np.ndarray:
        """Spacetime points (..., 1+n) at time level k, or the full grid."""
        ts = self.t if k is None else np.array([self.t[k]])
        mesh = np.meshgrid(ts, *self.axes, indexing="ij")
        P = np.stack(mesh, axis=-1)
        return P if k is None else P[0]

    def slabs(self, size: int = 16):
        """(k0, k1, points) over blocks of time levels."""
        ts = self.t
        for k0 in range(0, self.nt, size):
            k1 = min(k0 + size, self.nt)
            mesh = np.meshgrid(ts[k0:k1], *self.axes, indexing="ij")
            yield k0, k1, np.stack(mesh, axis=-1)

    def sample(self, f: Callable) -> np.ndarray:
        """f(X) on every node, X of shape (..., 1+n), evaluated in time slabs."""
        out = np.empty(self.shape)
        for k0, k1, P in self.slabs():
            out[k0:k1] = np.asarray(f(P), float).reshape(P.shape[:-1])
        return out

    def cell(self) -> float:
        return self.dt * self.dx ** self.n


@dataclass
class GridField:
    grid: WaveGrid
    values: np.ndarray       # u on the grid, shape grid.shape
    metric: LorentzianMetric

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise DomainError("field shape does not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("non-finite values in the field")


class _Coefficients:
    """Grid samples of the conformal reduction data."""

    def __init__(self, grid: WaveGrid, metric: LorentzianMetric, m_exp: int | None):
        n = grid.n
        if metric.n != n:
            raise DomainError("metric dimension does not match the grid")
        if isinstance(metric, Minkowski):
            c = None
        elif isinstance(metric, Conformal) and isinstance(metric.base, Minkowski):
            c = metric.c
        else:
            raise DomainError("the solver handles minkowski and conformal(minkowski, c) only")
        self.flat = c is None
        shape = grid.shape
        if self.flat:
            ones = np.ones(shape)
            self.u_of_v = ones
            self.src = ones
            self.q = None
            self.vol = ones
            self.cp = ones
            return
        a = (n - 1) / 4.0
        p = (n + 3 - (m_exp or 3) * (n - 1)) / 4.0
        self.u_of_v = np.empty(shape)
        self.src = np.empty(shape)
        self.vol = np.empty(shape)
        self.cp = np.empty(shape)
        self.q = None if a == 0 else np.empty(shape)
        eta = -np.ones(n + 1)
        eta[1:] = 1.0
        for k0, k1, P in grid.slabs():
            cv = c.value(P)
            self.u_of_v[k0:k1] = cv ** (-a)
            self.src[k0:k1] = cv ** ((n + 3) / 4.0)
            self.vol[k0:k1] = cv ** ((n + 1) / 2.0)
            self.cp[k0:k1] = cv ** p
            if a != 0:
                gc = c.grad(P)
                hc = c.hess(P)
                # box_eta c^a = a c^{a-1} box c + a (a-1) c^{a-2} <dc, dc>_eta
                box_c = np.einsum("...ii,i->...", hc, eta)
                dc2 = np.einsum("...i,...i,i->...", gc, gc, eta)
                box_ca = a * cv ** (a - 1) * box_c + a * (a - 1) * cv ** (a - 2) * dc2
                self.q[k0:k1] = -cv ** (-a) * box_ca


def _laplacian(v, dx):
    out = np.zeros_like(v)
    if v.ndim == 1:
        out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx ** 2
    else:
        out[1:-1, 1:-1] = (v[2:, 1:-1] + v[:-2, 1:-1] + v[1:-1, 2:] + v[1:-1, :-2]
                           - 4 * v[1:-1, 1:-1]) / dx ** 2
    return out


def _march(grid: WaveGrid, G: np.ndarray, co: _Coefficients, m_exp=None, backward=False):
    """Leapfrog for (box + q) v + c^p v^m = G with zero data at the start (end if backward)."""
    nt = grid.nt
    dt2 = grid.dt ** 2
    v = np.zeros(grid.shape)
    order = range(1, nt - 1) if not backward else range(nt - 2, 0, -1)
    step = 1 if not backward else -1
    for k in order:
        vk = v[k]
        rhs = _laplacian(vk, grid.dx) - G[k]
        if co.q is not None:
            rhs = rhs + co.q[k] * vk
        if m_exp is not None:
            rhs = rhs + co.cp[k] * vk ** m_exp
        nxt = 2 * vk - v[k - step] + dt2 * rhs
        # Dirichlet walls
        if nxt.ndim == 1:
            nxt[[0, -1]] = 0.0
        else:
            nxt[[0, -1], :] = 0.0
            nxt[:, [0, -1]] = 0.0
        if m_exp is not None and (not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > BLOWUP):
            raise DomainError("semilinear iteration diverged: source too large")
        v[k + step] = nxt
    return v


def _as_samples(grid, f):
    if callable(f):
        return grid.sample(f)
    f = np.asarray(f, float)
    if f.shape != grid.shape:
        raise DomainError("source samples do not match the grid")
    return f


def _check_support(f, direction):
    edge = f[:2] if direction == "forward" else f[-2:]
    if np.max(np.abs(edge), initial=0.0) > 1e-12 * max(np.max(np.abs(f), initial=0.0), 1e-300):
        side = "first" if direction == "forward" else "last"
        raise SourceSupportError(f"source must vanish on the {side} two time levels")


def solve_linear(grid: WaveGrid, metric: LorentzianMetric, f, direction: str = "forward") -> GridField:
    """box_g u = f with u = 0 before (forward) or after (backward) the support of f."""
    if direction not in ("forward", "backward"):
        raise DomainError("direction must be 'forward' or 'backward'")
    F = _as_samples(grid, f)
    _check_support(F, direction)
    co = _Coefficients(grid, metric, None)
    v = _march(grid, co.src * F, co, backward=(direction == "backward"))
    return GridField(grid, co.u_of_v * v, metric)


def solve_semilinear(grid: WaveGrid, metric: LorentzianMetric, f, m_exp: int = 3,
                     nonlinear: bool = True) -> GridField:
    """box_g u + u^m = f forward in time, the power treated explicitly in the leapfrog."""
    if int(m_exp) != m_exp or m_exp < 2:
        raise DomainError("the exponent must be an integer >= 2")
    F = _as_samples(grid, f)
    _check_support(F, "forward")
    co = _Coefficients(grid, metric, int(m_exp))
    v = _march(grid, co.src * F, co, int(m_exp) if nonlinear else None)
    return GridField(grid, co.u_of_v * v, metric)


def semilinear_residual(field: GridField, f, m_exp: int | None) -> float:
    """max over interior nodes of |discrete (box + q) v + c^p v^m - c^{(n+3)/4} f|."""
    grid = field.grid
    co = _Coefficients(grid, field.metric, m_exp)
    v = field.values / co.u_of_v
    F = _as_samples(grid, f)
    res = 0.0
    for k in range(1, grid.nt - 1):
        r = -(v[k + 1] - 2 * v[k] + v[k - 1]) / grid.dt ** 2 + _laplacian(v[k], grid.dx)
        if co.q is not None:
            r = r + co.q[k] * v[k]
        if m_exp is not None:
            r = r + co.cp[k] * v[k] ** m_exp
        r = r - co.src[k] * F[k]
        inner = r[1:-1] if r.ndim == 1 else r[1:-1, 1:-1]
        res = max(res, float(np.max(np.abs(inner))))
    return res


def discrete_energy(field: GridField) -> np.ndarray:
    """Leapfrog energy at half steps (flat metrics):
    1/2 |D_t u|^2 + 1/2 sum_i <D_i^+ u^{k+1}, D_i^+ u^k>, conserved where f = 0."""
    if not isinstance(field.metric, Minkowski):
        raise DomainError("the discrete energy is defined for minkowski grids")
    u = field.values
    g = field.grid
    vol = g.dx ** g.n
    kin = 0.5 * np.sum(((u[1:] - u[:-1]) / g.dt) ** 2, axis=tuple(range(1, u.ndim))) * vol
    pot = 0.0
    for ax in range(1, u.ndim):
        du = np.diff(u, axis=ax) / g.dx
        pot = pot + 0.5 * np.sum(du[1:] * du[:-1], axis=tuple(range(1, u.ndim)))
    return kin + pot * vol


def integrate(field_values, grid: WaveGrid, metric: LorentzianMetric) -> float:
    """Riemann sum of values dV_g over the grid."""
    co = _Coefficients(grid, metric, None)
    return float(np.sum(field_values * co.vol) * grid.cell())


def pairing(a: GridField, b: np.ndarray) -> float:
    return integrate(a.values * b, a.grid, a.metric)


_STENCILS = {2: {1: 0.5, -1: -0.5},
             4: {1: 8 / 12, -1: -8 / 12, 2: -1 / 12, -2: 1 / 12}}


@dataclass
class PairingReport:
    lhs: float
    rhs: float
    rel_diff: float
    lhs_half: float | None
    eps: float
    stencil: int
    solves: int


def _mixed_derivative(grid, metric, F0, Fs, m_exp, e, stencil):
    w = _STENCILS[stencil]
    total = 0.0
    count = 0
    co = _Coefficients(grid, metric, m_exp)
    G0 = co.src * F0
    for combo in itertools.product(w.keys(), repeat=len(Fs)):
        coef = np.prod([w[k] for k in combo])
        src = sum(k * e * F for k, F in zip(combo, Fs))
        v = _march(grid, co.src * src, co, m_exp)
        # <f0, u> dV_g = <G0, v> dx dt exactly
        total += coef * float(np.sum(G0 * v)) * grid.cell()
        count += 1
    return total / e ** len(Fs), count


def three_fold_pairing(grid: WaveGrid, metric: LorentzianMetric, f0, fs: Sequence, eps: float = 1e-3,
                       stencil: int = 4, check: bool = True, check_tol: float = 1e-2) -> PairingReport:
    """Both sides of the cubic (m-fold) linearization identity.

    lhs: mixed derivative d^m/de_1..de_m of int f0 u_e dV_g, u_e solving box u + u^m = sum e_j f_j,
         by central differences in each slot.
    rhs: -m! int u0 u1 ... um dV_g with u0 the backward solution for f0.
    """
    m_exp = len(fs)
    if m_exp < 2:
        raise DomainError("need at least two sources")
    if stencil not in _STENCILS:
        raise DomainError(f"stencil must be one of {sorted(_STENCILS)}")
    F0 = _as_samples(grid, f0)
    Fs = [_as_samples(grid, f) for f in fs]
    _check_support(F0, "backward")
    for F in Fs:
        _check_support(F, "forward")
    lhs, count = _mixed_derivative(grid, metric, F0, Fs, m_exp, eps, stencil)
    half = None
    if check:
        half, c2 = _mixed_derivative(grid, metric, F0, Fs, m_exp, 0.5 * eps, stencil)
        count += c2
        scale = max(abs(lhs), abs(half))
        if scale > 0 and abs(lhs - half) > check_tol * scale:
            raise DomainError("epsilon stencil too coarse: halving eps changes the derivative")
    u0 = solve_linear(grid, metric, F0, "backward")
    prod = u0.values.copy()
    for F in Fs:
        prod = prod * solve_linear(grid, metric, F, "forward").values
    co = _Coefficients(grid, metric, m_exp)
    # the nonlinearity weight c^p times the volume of u-variables collapses to c^p in v
    rhs = -math.factorial(m_exp) * float(np.sum(prod * co.vol) * grid.cell())
    denom = abs(rhs) if rhs != 0 else 1.0
    return PairingReport(lhs, rhs, abs(lhs - rhs) / denom, half, eps, stencil, count)


def gaussian_source(center, widths, amplitude=1.0) -> Callable:
    """Smooth bump f = A exp(-sum ((x - c)/w)^2) in spacetime, truncated below 1e-300."""
    center = np.asarray(center, float)
    widths = np.asarray(widths, float)

    def f(X):
        r2 = np.sum(((X - center) / widths) ** 2, axis=-1)
        out = amplitude * np.exp(-r2)
        out[r2 > 600] = 0.0
        return out
    return f


def compact_source(center, radii, amplitude=1.0) -> Callable:
    """C-infinity bump supported in the ellipsoid |(x - c)/r| < 1."""
    center = np.asarray(center, float)
    radii = np.asarray(radii, float)

    def f(X):
        r2 = np.sum(((X - center) / radii) ** 2, axis=-1)
        out = np.zeros(r2.shape)
        inside = r2 < 1
        out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
        return out
    return f


def dalembert_duhamel(f_time: Callable, sigma_x: float, amplitude: float, t0: float,
                      t: float, x: np.ndarray) -> np.ndarray:
    """Closed-form 1+1 solution of box u = f for f = A T(t) exp(-x^2/sigma^2), u = 0 before.

    u(t, x) = -1/2 int_{-inf}^t T(s) int_{x-(t-s)}^{x+(t-s)} A exp(-y^2/sigma^2) dy ds.
    """
    from scipy.integrate import quad
    from scipy.special import erf

    x = np.atleast_1d(np.asarray(x, float))
    out = np.empty_like(x)
    for i, xi in enumerate(x):
        def inner(s):
            L = t - s
            return f_time(s) * 0.5 * np.sqrt(np.pi) * sigma_x * (
                erf((xi + L) / sigma_x) - erf((xi - L) / sigma_x))
        out[i] = -0.5 * amplitude * quad(inner, t0, t, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return out
