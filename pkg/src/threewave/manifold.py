"""Spacetime points, tangent vectors and Lorentzian metric families.

All metric evaluations are vectorized over leading axes: a point array of
shape (..., d) gives g of shape (..., d, d), dg of shape (..., d, d, d) with
dg[..., k, i, j] = d_k g_ij, and Christoffel symbols gam[..., i, j, k] = Gamma^i_jk.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

EPS_NULL = 1e-9
H_G = 1e-5


class DomainError(ValueError):
    """Point or vector outside the domain of an operation."""


# ---------------------------------------------------------------------------
# points and vectors

@dataclass(frozen=True)
class SpacetimePoint:
    coords: np.ndarray
    chart_id: str = "global"

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).copy()
        if c.ndim != 1 or c.size < 3:
            raise DomainError("a spacetime point needs 1+n coordinates with n >= 2")
        if not np.all(np.isfinite(c)):
            raise DomainError("non-finite coordinates")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def dim(self) -> int:
        return self.coords.size


@dataclass(frozen=True)
class TangentVector:
    base: SpacetimePoint
    components: np.ndarray

    def __post_init__(self):
        if not isinstance(self.base, SpacetimePoint):
            object.__setattr__(self, "base", SpacetimePoint(self.base))
        c = np.asarray(self.components, dtype=float).copy()
        if c.shape != (self.base.dim,):
            raise DomainError("vector and base point dimensions differ")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    @property
    def x(self) -> np.ndarray:
        return self.base.coords

    @property
    def xi(self) -> np.ndarray:
        return self.components

    def state(self) -> np.ndarray:
        return np.concatenate([self.base.coords, self.components])

    def __neg__(self) -> "TangentVector":
        return TangentVector(self.base, -self.components)

    @classmethod
    def from_state(cls, st) -> "TangentVector":
        st = np.asarray(st, dtype=float)
        d = st.size // 2
        return cls(SpacetimePoint(st[:d]), st[d:])


def as_point(p) -> np.ndarray:
    if isinstance(p, SpacetimePoint):
        return p.coords
    return np.asarray(p, dtype=float)


# ---------------------------------------------------------------------------
# scalar fields (closed-form catalogue)

class ScalarField:
    """Positive smooth scalar c(x) with analytic gradient and Hessian."""

    name = "scalar"

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    @property
    def is_constant(self) -> bool:
        return False


@dataclass(frozen=True)
class Constant(ScalarField):
    c: float
    name = "constant"

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(self.c))

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (x.shape[-1],))

    def params(self):
        return {"value": float(self.c)}

    @property
    def is_constant(self):
        return True


@dataclass(frozen=True)
class GaussianBump(ScalarField):
    """c(x) = base + amplitude * exp(-|x - center|^2 / width^2)."""

    center: tuple
    width: float
    amplitude: float
    base: float = 1.0
    name = "gaussian_bump"

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        r = x - np.asarray(self.center, dtype=float)
        e = self.amplitude * np.exp(-np.sum(r * r, axis=-1) / self.width ** 2)
        return r, e

    def value(self, x):
        _, e = self._parts(x)
        return self.base + e

    def grad(self, x):
        r, e = self._parts(x)
        return (-2.0 / self.width ** 2) * e[..., None] * r

    def hess(self, x):
        r, e = self._parts(x)
        w2 = self.width ** 2
        d = r.shape[-1]
        outer = r[..., :, None] * r[..., None, :]
        return e[..., None, None] * (4.0 / w2 ** 2 * outer - 2.0 / w2 * np.eye(d))

    def params(self):
        return {"center": list(map(float, self.center)), "width": float(self.width),
                "amplitude": float(self.amplitude), "base": float(self.base)}


@dataclass(frozen=True)
class ExpLinear(ScalarField):
    """c(x) = exp(k . x + b)."""

    k: tuple
    b: float = 0.0
    name = "exp_linear"

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(x @ np.asarray(self.k, dtype=float) + self.b)

    def grad(self, x):
        k = np.asarray(self.k, dtype=float)
        return self.value(x)[..., None] * k

    def hess(self, x):
        k = np.asarray(self.k, dtype=float)
        return self.value(x)[..., None, None] * np.outer(k, k)

    def params(self):
        return {"k": list(map(float, self.k)), "b": float(self.b)}


def smooth_bump(x, center, radii, order=2):
    """Compactly supported bump exp(1 - 1/(1-u)), u = sum ((x-c)/R)^2.

    Returns value (...), gradient (..., d), Hessian (..., d, d); derivatives
    above ``order`` are returned as None.
    """
    x = np.asarray(x, dtype=float)
    R = np.asarray(radii, dtype=float)
    q = (x - np.asarray(center, dtype=float)) / R
    u = np.sum(q * q, axis=-1)
    inside = u < 1.0
    us = np.where(inside, u, 0.0)
    w = 1.0 / (1.0 - us)
    f = np.where(inside, np.exp(1.0 - w), 0.0)
    if order == 0:
        return f, None, None
    f1 = -f * w ** 2
    du = 2.0 * q / R
    grad = f1[..., None] * du
    if order == 1:
        return f, grad, None
    f2 = f * (w ** 4 - 2.0 * w ** 3)
    d = x.shape[-1]
    hess = (f2[..., None, None] * du[..., :, None] * du[..., None, :]
            + f1[..., None, None] * np.eye(d) * (2.0 / R ** 2))
    return f, grad, hess


# ---------------------------------------------------------------------------
# metrics

class LorentzianMetric:
    """Base class. Subclasses provide g and (optionally) dg analytically."""

    family = "abstract"

    def __init__(self, n: int):
        if n < 1:
            raise DomainError("spatial dimension must be >= 1")
        self.n = int(n)
        self.dim = self.n + 1

    # -- to be provided -------------------------------------------------
    def g(self, x):
        raise NotImplementedError

    def dg(self, x):
        return self._dg_fd(x)

    def params(self) -> dict:
        return {}

    @property
    def is_flat(self) -> bool:
        """True when Christoffel symbols vanish identically in the chart."""
        return False

    def flat_on_box(self, lo, hi) -> bool:
        """True when the metric is constant on the coordinate box [lo, hi]."""
        return self.is_flat

    # -- derived ----------------------------------------------------------
    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DomainError(f"expected points of dimension {self.dim}, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite point")
        return x

    def _dg_fd(self, x, h=None):
        h = H_G if h is None else h
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.dim, self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            out[..., k, :, :] = (self.g(x + e) - self.g(x - e)) / (2 * h)
        return out

    def ginv(self, x):
        return np.linalg.inv(self.g(x))

    def christoffel(self, x):
        x = self._check(x)
        if self.is_flat:
            return np.zeros(x.shape[:-1] + (self.dim,) * 3)
        gi = self.ginv(x)
        dg = self.dg(x)
        # lowered: Gamma_l,jk = 1/2 (d_j g_lk + d_k g_lj - d_l g_jk)
        low = 0.5 * (np.swapaxes(dg, -3, -2) + np.moveaxis(dg, -3, -1) - dg)
        # dg[..., j, l, k] -> swap to [..., l, j, k]; moveaxis puts [k, l, j] as [l, j, k]
        return np.einsum("...il,...ljk->...ijk", gi, low)

    def dchristoffel(self, x, h=1e-4):
        """d_m Gamma^i_jk by 4th-order central differences, shape (..., m, i, j, k)."""
        x = self._check(x)
        out = np.zeros(x.shape[:-1] + (self.dim,) * 4)
        if self.is_flat:
            return out
        for m in range(self.dim):
            e = np.zeros(self.dim)
            e[m] = h
            out[..., m, :, :, :] = (8 * (self.christoffel(x + e) - self.christoffel(x - e))
                                    - (self.christoffel(x + 2 * e) - self.christoffel(x - 2 * e))) / (12 * h)
        return out

    def geodesic_acceleration(self, x, v):
        """-Gamma^i_jk v^j v^k for arrays x, v of shape (..., d)."""
        return -np.einsum("...ijk,...j,...k->...i", self.christoffel(x), v, v)

    def volume(self, x):
        return np.sqrt(np.abs(np.linalg.det(self.g(x))))

    def describe(self) -> dict:
        return {"family": self.family, "n": self.n, **self.params()}


class Minkowski(LorentzianMetric):
    family = "minkowski"

    def g(self, x):
        x = self._check(x)
        eta = np.eye(self.dim)
        eta[0, 0] = -1.0
        return np.broadcast_to(eta, x.shape[:-1] + eta.shape).copy()

    def dg(self, x):
        x = self._check(x)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    @property
    def is_flat(self):
        return True


class Conformal(LorentzianMetric):
    """g = c(x) * base."""

    family = "conformal"

    def __init__(self, base: LorentzianMetric, c: ScalarField):
        super().__init__(base.n)
        self.base = base
        self.c = c

    def g(self, x):
        x = self._check(x)
        cv = self.c.value(x)
        if np.any(cv <= 0):
            raise DomainError("conformal factor must be positive")
        return cv[..., None, None] * self.base.g(x)

    def dg(self, x):
        x = self._check(x)
        cv = self.c.value(x)
        gc = self.c.grad(x)
        return (gc[..., :, None, None] * self.base.g(x)[..., None, :, :]
                + cv[..., None, None, None] * self.base.dg(x))

    def geodesic_acceleration(self, x, v):
        if not isinstance(self.base, Minkowski):
            return super().geodesic_acceleration(x, v)
        # Gamma^i_jk = (d_j w d^i_k + d_k w d^i_j - eta_jk eta^il d_l w)/2, w = log c
        gw = self.c.grad(x) / self.c.value(x)[..., None]
        vv = -v[..., 0] ** 2 + np.sum(v[..., 1:] ** 2, axis=-1)
        up = gw.copy()
        up[..., 0] *= -1.0
        return -(np.sum(gw * v, axis=-1)[..., None] * v - 0.5 * vv[..., None] * up)

    @property
    def is_flat(self):
        return self.c.is_constant and self.base.is_flat

    def flat_on_box(self, lo, hi):
        return self.is_flat

    def params(self):
        return {"base": self.base.describe(), "c": {"name": self.c.name, **self.c.params()}}


class WarpedProduct(LorentzianMetric):
    """g = c(x) (-dt^2 + sigma(x) |dx'|^2), a diagonal instance of the time/space splitting."""

    family = "warped_product"

    def __init__(self, n: int, c: ScalarField, sigma: ScalarField):
        super().__init__(n)
        self.c = c
        self.sigma = sigma

    def _diag(self, x):
        x = self._check(x)
        cv, sv = self.c.value(x), self.sigma.value(x)
        diag = np.empty(x.shape[:-1] + (self.dim,))
        diag[..., 0] = -cv
        diag[..., 1:] = (cv * sv)[..., None]
        return x, cv, sv, diag

    def g(self, x):
        _, _, _, diag = self._diag(x)
        return diag[..., :, None] * np.eye(self.dim)

    def dg(self, x):
        x, cv, sv, _ = self._diag(x)
        gc, gs = self.c.grad(x), self.sigma.grad(x)
        dd = np.empty(x.shape[:-1] + (self.dim, self.dim))  # [..., k, i] = d_k diag_i
        dd[..., :, 0] = -gc
        dd[..., :, 1:] = (gc * sv[..., None] + cv[..., None] * gs)[..., :, None]
        return dd[..., :, :, None] * np.eye(self.dim)

    @property
    def is_flat(self):
        return self.c.is_constant and self.sigma.is_constant

    def params(self):
        return {"c": {"name": self.c.name, **self.c.params()},
                "sigma": {"name": self.sigma.name, **self.sigma.params()}}


class PerturbedMinkowski(LorentzianMetric):
    """g = eta + amplitude * b(x) * P with b a compactly supported bump.

    ``shape`` is the constant symmetric matrix P.  The default P = 2 I gives
    -(1 - 2ab) dt^2 + (1 + 2ab)|dx|^2, a weak-field lens with refractive index
    above one inside the bump; it focuses null geodesics for 0 < amplitude < 1/2.
    """

    family = "perturbed_minkowski"

    def __init__(self, n: int, amplitude: float, center, radii, shape=None):
        super().__init__(n)
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.radii = np.broadcast_to(np.asarray(radii, dtype=float), (self.dim,)).copy()
        if shape is None:
            shape = 2.0 * np.eye(self.dim)
        self.shape = np.asarray(shape, dtype=float)
        if not np.allclose(self.shape, self.shape.T):
            raise DomainError("perturbation shape must be symmetric")
        self._eta = np.eye(self.dim)
        self._eta[0, 0] = -1.0

    def bump(self, x, order=2):
        return smooth_bump(x, self.center, self.radii, order)

    def g(self, x):
        x = self._check(x)
        b, _, _ = self.bump(x, 0)
        return self._eta + self.amplitude * b[..., None, None] * self.shape

    def dg(self, x):
        x = self._check(x)
        _, gb, _ = self.bump(x, 1)
        return self.amplitude * gb[..., :, None, None] * self.shape

    def d2g(self, x):
        x = self._check(x)
        _, _, hb = self.bump(x)
        return self.amplitude * hb[..., :, :, None, None] * self.shape

    def geodesic_acceleration(self, x, v):
        # d_k g_ij = a d_k b P_ij, so Gamma_l,jk v^j v^k = a((db.v)(Pv)_l - (vPv) d_l b / 2)
        b, gb, _ = self.bump(x, 1)
        a = self.amplitude
        Pv = v @ self.shape
        low = a * (np.sum(gb * v, axis=-1)[..., None] * Pv
                   - 0.5 * np.sum(v * Pv, axis=-1)[..., None] * gb)
        gm = self._eta + a * b[..., None, None] * self.shape
        return -np.linalg.solve(gm, low[..., None])[..., 0]

    @property
    def is_flat(self):
        return self.amplitude == 0.0

    def flat_on_box(self, lo, hi):
        if self.is_flat:
            return True
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        # closest box point to the ellipsoid centre, in scaled coordinates
        q = (np.clip(self.center, lo, hi) - self.center) / self.radii
        return bool(np.sum(q * q) >= 1.0)

    def params(self):
        return {"amplitude": self.amplitude, "center": self.center.tolist(),
                "radii": self.radii.tolist(), "shape": self.shape.tolist()}


# ---------------------------------------------------------------------------
# quasi-linear metric family

@dataclass
class QuasiMetricFamily:
    """G(x, z) = g(x) + z^2 h(x) (+ optional higher order), so h = 1/2 d_z^2 G(x, 0)."""

    metric: LorentzianMetric
    h_func: Callable
    cubic: Callable | None = None

    def G(self, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)[..., None, None]
        out = self.metric.g(x) + z ** 2 * self.h(x)
        if self.cubic is not None:
            out = out + z ** 3 * self.cubic(x)
        return out

    def h(self, x):
        x = np.asarray(x, dtype=float)
        hv = np.asarray(self.h_func(x), dtype=float)
        return np.broadcast_to(hv, x.shape[:-1] + (self.metric.dim,) * 2)

    def S(self, x):
        """S^jk = g^jj' h_j'k' g^k'k."""
        gi = self.metric.ginv(x)
        return gi @ self.h(x) @ gi


def constant_h(matrix) -> Callable:
    m = np.asarray(matrix, dtype=float)
    return lambda x: m


# ---------------------------------------------------------------------------
# elementary operations

def metric_at(m: LorentzianMetric, p) -> np.ndarray:
    gm = m.g(as_point(p))
    ev = np.linalg.eigvalsh(gm)
    if np.any(np.sum(ev < 0, axis=-1) != 1):
        raise DomainError("metric is not Lorentzian at the given point")
    return gm


def inner_product(m: LorentzianMetric, v: TangentVector, w: TangentVector) -> float:
    if not np.array_equal(v.x, w.x):
        raise DomainError("vectors live at different base points")
    return float(v.xi @ m.g(v.x) @ w.xi)


def classify_vector(m: LorentzianMetric, v: TangentVector, eps_null: float = EPS_NULL):
    """Return (causal type, time orientation) for a non-zero vector."""
    xi = v.xi
    nrm = np.linalg.norm(xi)
    if nrm == 0:
        raise DomainError("zero vector has no causal type")
    u = xi / nrm
    q = float(u @ m.g(v.x) @ u)
    if abs(q) <= eps_null:
        kind = "null"
    elif q < 0:
        kind = "timelike"
    else:
        kind = "spacelike"
    if kind == "spacelike":
        return kind, "none"
    # time orientation from dx^0: future causal vectors have dx^0(xi) > 0 when
    # the x^0 slices are spacelike (all catalogue metrics)
    return kind, ("future" if u[0] > 0 else "past")


def christoffel(m: LorentzianMetric, p) -> np.ndarray:
    x = as_point(p)
    gm = m.g(x)
    if np.any(np.abs(np.linalg.det(gm)) < 1e-300):
        raise DomainError("degenerate metric")
    return m.christoffel(x)


def project_null(m: LorentzianMetric, x, xi, future: bool = True) -> np.ndarray:
    """Solve for the time component so that xi is exactly null (spatial part kept)."""
    x = np.asarray(x, dtype=float)
    xi = np.array(xi, dtype=float)
    gm = m.g(x)
    a = gm[..., 0, 0]
    sp = xi[..., 1:]
    b = 2.0 * np.einsum("...i,...i->...", gm[..., 0, 1:], sp)
    c = np.einsum("...i,...ij,...j->...", sp, gm[..., 1:, 1:], sp)
    disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
    r1 = (-b - disc) / (2 * a)
    r2 = (-b + disc) / (2 * a)
    xi[..., 0] = np.maximum(r1, r2) if future else np.minimum(r1, r2)
    return xi


def null_frame(m: LorentzianMetric, x, L):
    """Null frame (L, N, E_2..E_n) at x with <L,N> = 1, E's orthonormal and orthogonal to L, N.

    Returns a (d, d) array with rows L, N, E_2, ..., E_n.
    """
    x = np.asarray(x, dtype=float)
    L = np.asarray(L, dtype=float)
    gm = m.g(x)
    d = L.size
    ip = lambda a, b: float(a @ gm @ b)
    # auxiliary future timelike T: unit normal direction of the x^0 slice
    gi = np.linalg.inv(gm)
    T = -gi[:, 0] / np.sqrt(-gi[0, 0])
    # N = -(T + a L) with chosen a so that N null and <L, N> = 1
    lt = ip(L, T)
    # candidate N = alpha*(T - (1/(2 lt)) * ... ) ; use standard construction
    # N0 = T + beta L null: <T,T> + 2 beta <T,L> = 0 -> beta = 1/(2 lt) since <T,T> = -1
    beta = 1.0 / (2.0 * lt)
    N = T + beta * L
    N = N / ip(L, N)
    frame = [L, N]
    # complete with Gram-Schmidt on coordinate axes, projected orthogonal to L and N
    def proj(w):
        return w - ip(w, N) * L - ip(w, L) * N
    cand = [np.eye(d)[k] for k in range(1, d)] + [np.eye(d)[0]]
    for w in cand:
        if len(frame) == d:
            break
        u = proj(w)
        for e in frame[2:]:
            u = u - ip(u, e) * e
        nn = ip(u, u)
        if nn > 1e-8:
            frame.append(u / np.sqrt(nn))
    return np.array(frame)
