"""Gaussian beams along null geodesics and the real-valued sources that generate them.

Beams are truncated at the explicit terms: phase y^1 + y'^T H(s) y' and principal
amplitude (det Y(s))^{-1/2}, with H = Z Y^{-1} from the linear Riccati system
Y' = C Z, Z' = -D Y.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .manifold import LorentzianMetric, TangentVector, DomainError, ScalarField
from .fermi import FermiChart, build_fermi_chart

RICCATI_RTOL = 1e-12
RICCATI_ATOL = 1e-14


# -- cutoffs -------------------------------------------------------------------

def _psi(t):
    t = np.asarray(t, float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(x, x0, x1):
    """C-infinity step: 0 for x <= x0, 1 for x >= x1."""
    u = (np.asarray(x, float) - x0) / (x1 - x0)
    a, b = _psi(u), _psi(1.0 - u)
    return a / (a + b)


def chi(t):
    """Radial cutoff: 1 for |t| <= 1/4, 0 for |t| >= 1/2."""
    return 1.0 - smooth_step(np.abs(t), 0.25, 0.5)


def zeta_minus(x0, q0, delta):
    """0 for x0 <= q0 - delta, 1 for x0 >= q0 - delta/2."""
    return smooth_step(x0, q0 - delta, q0 - 0.5 * delta)


def zeta_plus(x0, q0, delta):
    """1 for x0 <= q0 - delta/2, 0 for x0 >= q0."""
    return 1.0 - smooth_step(x0, q0 - 0.5 * delta, q0)


# -- Riccati -----------------------------------------------------------------------

def c_matrix(n: int) -> np.ndarray:
    C = 2.0 * np.eye(n)
    C[0, 0] = 0.0
    return C


def check_initial_data(Y0, Z0, tol=1e-10):
    Y0 = np.asarray(Y0, complex)
    Z0 = np.asarray(Z0, complex)
    if Y0.ndim != 2 or Y0.shape[0] != Y0.shape[1] or Y0.shape != Z0.shape:
        raise DomainError("Y0 and Z0 must be square matrices of equal size")
    if abs(np.linalg.det(Y0)) < 1e-14:
        raise DomainError("Y0 is singular")
    H0 = Z0 @ np.linalg.inv(Y0)
    if np.max(np.abs(H0 - H0.T)) > tol * max(1.0, np.max(np.abs(H0))):
        raise DomainError("Z0 Y0^-1 is not symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (H0.imag + H0.imag.T))) <= 0:
        raise DomainError("Im(Z0 Y0^-1) is not positive definite")
    return Y0, Z0


@dataclass
class RiccatiSolution:
    nodes: np.ndarray
    Y_nodes: np.ndarray
    Z_nodes: np.ndarray
    s_init: float
    n: int
    y0: np.ndarray = None
    _sol_fwd: object = None
    _sol_bwd: object = None
    _logdet: object = None

    def _state(self, s):
        s = np.atleast_1d(np.asarray(s, float))
        n = self.n
        out = np.empty((s.size, 2 * n * n), complex)
        fwd = s >= self.s_init
        for mask, sol in ((fwd, self._sol_fwd), (~fwd, self._sol_bwd)):
            if np.any(mask):
                out[mask] = sol.sol(s[mask]).T if sol is not None else self.y0
        return out

    @property
    def _i0(self):
        return int(np.argmin(np.abs(self.nodes - self.s_init)))

    def Y(self, s):
        s = np.asarray(s, float)
        return self._state(s)[:, : self.n ** 2].reshape(s.shape + (self.n, self.n))

    def Z(self, s):
        s = np.asarray(s, float)
        return self._state(s)[:, self.n ** 2:].reshape(s.shape + (self.n, self.n))

    def H(self, s):
        st = self._state(s)
        n = self.n
        Y = st[:, : n * n].reshape(-1, n, n)
        Z = st[:, n * n:].reshape(-1, n, n)
        H = np.linalg.solve(np.swapaxes(Y, -1, -2), np.swapaxes(Z, -1, -2))
        H = np.swapaxes(H, -1, -2)
        return H.reshape(np.shape(s) + (n, n))

    def log_det_Y(self, s):
        """Continuous branch of log det Y(s)."""
        s = np.asarray(s, float)
        return self._logdet[0](s) + 1j * self._logdet[1](s)

    def a00(self, s):
        return np.exp(-0.5 * self.log_det_Y(s))

    # -- diagnostics ----------------------------------------------------------
    def conservation_drift(self) -> float:
        """max relative change of det(Im H) |det Y|^2 over the nodes."""
        H = self.H(self.nodes)
        v = np.linalg.det(H.imag) * np.abs(np.linalg.det(self.Y_nodes)) ** 2
        v0 = v[self._i0]
        return float(np.max(np.abs(v - v0)) / abs(v0))

    def symmetry_error(self) -> float:
        H = self.H(self.nodes)
        return float(np.max(np.abs(H - np.swapaxes(H, -1, -2))))

    def min_imag_eig(self) -> float:
        H = self.H(self.nodes)
        sym = 0.5 * (H.imag + np.swapaxes(H.imag, -1, -2))
        return float(np.min(np.linalg.eigvalsh(sym)))

    def min_abs_det_Y(self) -> float:
        return float(np.min(np.abs(np.linalg.det(self.Y_nodes))))


def solve_riccati(m: LorentzianMetric, chart: FermiChart, iota, grid, s_init: float = 0.0,
                  D_func=None, log_det_init=None) -> RiccatiSolution:
    """Integrate Y' = C Z, Z' = -D Y from (Y0, Z0) at s_init over the grid."""
    Y0, Z0 = check_initial_data(*iota)
    n = chart.n
    if Y0.shape != (n, n):
        raise DomainError(f"initial matrices must be {n}x{n}")
    grid = np.unique(np.append(np.asarray(grid, float), s_init))
    C = c_matrix(n)
    if D_func is None:
        if chart.flat:
            D_func = None
        else:
            lo, hi = grid[0], grid[-1]
            dn = np.linspace(lo, hi, max(201, int(80 * (hi - lo)) + 1))
            D_spl = CubicSpline(dn, chart.D_matrix(dn))
            D_func = D_spl

    def rhs(s, y):
        Y = y[: n * n].reshape(n, n)
        Z = y[n * n:].reshape(n, n)
        dY = C @ Z
        dZ = -(D_func(s) @ Y) if D_func is not None else np.zeros_like(Z)
        return np.concatenate([dY.ravel(), dZ.ravel()])

    y0 = np.concatenate([Y0.ravel(), Z0.ravel()])
    sols = {}
    for key, end in (("fwd", grid[-1]), ("bwd", grid[0])):
        if end == s_init:
            sols[key] = None
            continue
        sol = solve_ivp(rhs, (s_init, end), y0, method="DOP853", rtol=RICCATI_RTOL,
                        atol=RICCATI_ATOL, dense_output=True)
        if sol.status < 0:
            raise DomainError(f"Riccati integration failed: {sol.message}")
        sols[key] = sol
    res = RiccatiSolution(grid, np.empty((0,)), np.empty((0,)), s_init, n, y0,
                          sols["fwd"], sols["bwd"])
    st = res._state(grid)
    res.Y_nodes = st[:, : n * n].reshape(-1, n, n)
    res.Z_nodes = st[:, n * n:].reshape(-1, n, n)
    # continuous branch of log det Y on a fine grid, anchored at s_init
    fine = np.unique(np.concatenate([np.linspace(grid[0], grid[-1], 2001), [s_init]]))
    dets = np.linalg.det(res.Y(fine))
    i0 = int(np.searchsorted(fine, s_init))
    l0 = np.log(np.linalg.det(Y0)) if log_det_init is None else complex(log_det_init)
    ang = np.unwrap(np.angle(dets))
    ang += l0.imag - ang[i0]
    res._logdet = (CubicSpline(fine, np.log(np.abs(dets))), CubicSpline(fine, ang))
    return res


# -- beams -------------------------------------------------------------------------

class GaussianBeam:
    """Truncated Gaussian beam U = exp(i kappa lam phi) A (conjugated for kappa < 0)."""

    order_N_metadata = staticmethod(lambda n: int(np.ceil(1.5 * n)) + 8)

    def __init__(self, chart: FermiChart, riccati: RiccatiSolution, kappa: float, lam: float,
                 delta: float, s_range, scale: float = 1.0):
        if kappa == 0:
            raise DomainError("kappa must be non-zero")
        self.chart = chart
        self.riccati = riccati
        self.kappa = float(kappa)
        self.lam = float(lam)
        self.delta = float(delta)
        self.a, self.b = float(s_range[0]), float(s_range[1])
        self.scale = float(scale)
        self.n = chart.n
        self.N = self.order_N_metadata(self.n)

    @property
    def metric(self):
        return self.chart.metric

    # -- chart-coordinate evaluation -------------------------------------------------
    def phase_sy(self, s, y):
        s = np.asarray(s, float)
        y = np.asarray(y, float)
        su, inv = np.unique(s.ravel(), return_inverse=True)
        H = self.riccati.H(su)[inv].reshape(s.shape + (self.n, self.n))
        return y[..., 0] + np.einsum("...j,...jk,...k->...", y, H, y)

    def amplitude_sy(self, s, y):
        s = np.asarray(s, float)
        r = np.linalg.norm(np.asarray(y, float), axis=-1) / self.delta
        inside = (s >= self.a) & (s <= self.b)
        a = np.zeros(s.shape, complex)
        if np.any(inside):
            su, inv = np.unique(s[inside], return_inverse=True)
            a[inside] = self.riccati.a00(su)[inv]
        return self.scale * chi(r) * a

    def combine(self, phi, amp, lam=None):
        """U from precomputed phase and amplitude values."""
        lam = self.lam if lam is None else lam
        k = abs(self.kappa) * lam
        U = np.exp(1j * k * phi) * amp
        return np.conj(U) if self.kappa < 0 else U

    def eval_sy(self, s, y, lam=None):
        return self.combine(self.phase_sy(s, y), self.amplitude_sy(s, y), lam)

    # -- spacetime evaluation ----------------------------------------------------------
    def _locate(self, X):
        """Chart coordinates of points X (k, d) and the mask of points inside the tube."""
        s, y = self.chart.inverse(X)
        ok = (s >= self.a) & (s <= self.b) & (np.linalg.norm(y, axis=-1) < 0.5 * self.delta)
        # the inverse is only trusted where it round-trips
        if np.any(ok):
            back = self.chart.forward(s[ok], y[ok])
            good = np.max(np.abs(back - X[ok]), axis=-1) < 1e-8
            idx = np.nonzero(ok)[0]
            ok[idx[~good]] = False
        return s, y, ok

    def phase_amp(self, x):
        """(phi, A) at spacetime points x (..., d); A = 0 outside the tube."""
        x = np.asarray(x, float)
        shp = x.shape[:-1]
        X = x.reshape(-1, x.shape[-1])
        phi = np.zeros(len(X), complex)
        amp = np.zeros(len(X), complex)
        if len(X) == 0:
            return phi.reshape(shp), amp.reshape(shp)
        s, y, ok = self._locate(X)
        if np.any(ok):
            phi[ok] = self.phase_sy(s[ok], y[ok])
            amp[ok] = self.amplitude_sy(s[ok], y[ok])
        return phi.reshape(shp), amp.reshape(shp)

    def __call__(self, x, lam=None):
        phi, amp = self.phase_amp(x)
        return self.combine(phi, amp, lam)

    def field_and_gradient(self, x, lam=None, eps=1e-5):
        """U and its coordinate gradient dU/dx^a at spacetime points x (..., d).

        The y-derivatives are analytic; d/ds uses a centred difference of H(s).
        """
        lam = self.lam if lam is None else lam
        x = np.asarray(x, float)
        shp = x.shape[:-1]
        d = x.shape[-1]
        X = x.reshape(-1, d)
        U = np.zeros(len(X), complex)
        dU = np.zeros((len(X), d), complex)
        if len(X) == 0:
            return U.reshape(shp), dU.reshape(shp + (d,))
        s, y, ok = self._locate(X)
        if np.any(ok):
            s, y = s[ok], y[ok]
            su, inv = np.unique(s, return_inverse=True)
            H = self.riccati.H(su)
            dH = (self.riccati.H(su + eps) - self.riccati.H(su - eps)) / (2 * eps)
            a = self.riccati.a00(su)
            da = -0.5 * np.einsum("ij,kji->k", c_matrix(self.n), H) * a
            H, dH, a, da = H[inv], dH[inv], a[inv], da[inv]
            phi = y[:, 0] + np.einsum("kj,kjl,kl->k", y, H, y)
            grad_phi = np.empty((len(s), d), complex)
            grad_phi[:, 0] = np.einsum("kj,kjl,kl->k", y, dH, y)
            grad_phi[:, 1:] = 2.0 * np.einsum("kjl,kl->kj", H, y)
            grad_phi[:, 1] += 1.0
            ry = np.linalg.norm(y, axis=-1)
            r = ry / self.delta
            c = chi(r)
            hr = 1e-6
            dc = (chi(r + hr) - chi(r - hr)) / (2 * hr)
            A = self.scale * c * a
            grad_A = np.empty((len(s), d), complex)
            grad_A[:, 0] = self.scale * c * da
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where(ry[:, None] > 0, y / ry[:, None], 0.0)
            grad_A[:, 1:] = (self.scale * dc * a / self.delta)[:, None] * unit
            k = abs(self.kappa) * lam
            e = np.exp(1j * k * phi)
            W = e * A
            gW = e[:, None] * (1j * k * grad_phi * A[:, None] + grad_A)
            J = self.chart.jacobian(s, y)
            gx = np.linalg.solve(np.swapaxes(J, -1, -2), gW[..., None])[..., 0]
            if self.kappa < 0:
                W, gx = np.conj(W), np.conj(gx)
            U[ok] = W
            dU[ok] = gx
        return U.reshape(shp), dU.reshape(shp + (d,))

    # -- diagnostics ---------------------------------------------------------------------
    def imag_lower_bound(self, s_samples=None) -> float:
        if s_samples is None:
            s_samples = np.linspace(self.a, self.b, 201)
        H = self.riccati.H(np.asarray(s_samples, float))
        return float(np.min(np.linalg.eigvalsh(0.5 * (H.imag + np.swapaxes(H.imag, -1, -2)))))

    def phase_gradient_error(self, s_samples, h=1e-5) -> float:
        """max |grad^g phi - gamma'| on gamma, from centred differences in spacetime."""
        s_samples = np.atleast_1d(np.asarray(s_samples, float))
        m = self.metric
        d = m.dim
        x = self.chart.gamma(s_samples)
        grad = np.empty((len(s_samples), d), complex)
        for a in range(d):
            e = np.zeros(d)
            e[a] = h
            fp, _ = self.phase_amp(x + e)
            fm, _ = self.phase_amp(x - e)
            f2p, _ = self.phase_amp(x + 2 * e)
            f2m, _ = self.phase_amp(x - 2 * e)
            grad[:, a] = (8 * (fp - fm) - (f2p - f2m)) / (12 * h)
        up = np.einsum("kab,kb->ka", m.ginv(x), grad)
        return float(np.max(np.abs(up - self.chart.gamma_dot(s_samples))))


def default_iota(n: int):
    return np.eye(n, dtype=complex), 1j * np.eye(n)


def build_beam(m: LorentzianMetric, v: TangentVector, kappa: float = 1.0, lam: float = 40.0,
               iota=None, delta: float = 0.2, s_range=(0.0, 1.0), s_init: float = 0.0,
               chart: FermiChart | None = None, log_det_init=None, scale: float = 1.0,
               chart_pad: float = 0.5) -> GaussianBeam:
    if kappa == 0:
        raise DomainError("kappa must be non-zero")
    a, b = float(s_range[0]), float(s_range[1])
    lo, hi = min(a, s_init), max(b, s_init)
    if chart is None:
        chart = build_fermi_chart(m, v, (lo, hi), delta)
        delta = min(delta, chart.delta)
    n = m.n
    iota = default_iota(n) if iota is None else iota
    grid = np.linspace(lo - 0.25 * chart_pad, hi + 0.25 * chart_pad, 401)
    ric = solve_riccati(m, chart, iota, grid, s_init=s_init, log_det_init=log_det_init)
    return GaussianBeam(chart, ric, kappa, lam, delta, (a, b), scale=scale)


# -- finite-difference wave operator on chart grids -----------------------------------

_D1 = {2: (np.array([-1, 0, 1]) / 2.0, 1),
       4: (np.array([1, -8, 0, 8, -1]) / 12.0, 2),
       6: (np.array([-1, 9, -45, 0, 45, -9, 1]) / 60.0, 3)}


def fd_first(u, axis, h, order=6):
    """Centred first derivative on the interior (order/2 points trimmed at both ends)."""
    w, r = _D1[order]
    u = np.moveaxis(u, axis, 0)
    n = u.shape[0]
    out = sum(w[k] * u[k: n - 2 * r + k] for k in range(2 * r + 1) if w[k] != 0)
    return np.moveaxis(out / h, 0, axis)


def _trim(u, axes, r):
    sl = [slice(None)] * u.ndim
    for ax in axes:
        sl[ax] = slice(r, u.shape[ax] - r)
    return u[tuple(sl)]


def chart_wave_operator(u, steps, Ginv=None, sqrtG=None, order=6):
    """Box_g u in divergence form on a tensor grid of chart coordinates.

    u has one axis per chart coordinate (s, y^1..y^n).  Ginv (..., d, d) and sqrtG
    are the inverse metric and volume density on the same grid; None means the
    constant normal form.  The result is trimmed by two stencil radii on every axis.
    """
    d = u.ndim
    r = _D1[order][1]
    axes = list(range(d))
    grads = [fd_first(u, a, steps[a], order) for a in axes]
    # trim every derivative to the common interior
    grads = [_trim(g, [b for b in axes if b != a], r) for a, g in enumerate(grads)]
    if Ginv is None:
        n = d - 1
        Gi = np.zeros((d, d))
        Gi[0, 1] = Gi[1, 0] = 1.0
        Gi[2:, 2:] = np.eye(n - 1)
        out = 0.0
        for a in axes:
            flux = sum(Gi[a, b] * grads[b] for b in axes if Gi[a, b] != 0)
            if isinstance(flux, float):
                continue
            out = out + _trim(fd_first(flux, a, steps[a], order), [b for b in axes if b != a], r)
        return out
    Gi_t = _trim(Ginv, axes, r)
    sq_t = _trim(sqrtG, axes, r)
    out = 0.0
    for a in axes:
        flux = sq_t * sum(Gi_t[..., a, b] * grads[b] for b in axes)
        out = out + _trim(fd_first(flux, a, steps[a], order), [b for b in axes if b != a], r)
    return out / _trim(sq_t, axes, r)


def truncated_residual_exponent(n: int) -> float:
    """Order count for ||Box U_lam||_{L^2} ~ lam^p of the truncated beam.

    Terms of Box(e^{i lam phi} a): lam^2 <dphi,dphi> vanishes to third order in y',
    lam (2<dphi,da> + Box(phi) a) to first order, and Box a is O(1).  With the
    Gaussian width y' ~ lam^{-1/2} each term of degree k in y' and lam power j
    contributes lam^{j - k/2} pointwise; the L^2 norm over the n transverse
    variables adds lam^{-n/4}.
    """
    terms = [(2, 3), (1, 1), (0, 0)]
    return max(j - k / 2.0 for j, k in terms) - n / 4.0


@dataclass
class ResidualReport:
    lams: np.ndarray
    norms: np.ndarray
    slope: float
    predicted: float


def _chart_grid(beam: GaussianBeam, lam, s_range, width, hy_factor, hs):
    n = beam.n
    k = abs(beam.kappa) * lam
    wavelength = 2 * np.pi / k
    hy = min(beam.delta / 20.0, hy_factor / k)
    if hy > wavelength / 10:
        raise DomainError("grid under-resolves the wavelength")
    pad = 3 * 2
    ny = int(np.ceil(width / hy))
    y_ax = hy * np.arange(-ny - pad, ny + pad + 1)
    ns = int(np.ceil((s_range[1] - s_range[0]) / hs))
    s_ax = s_range[0] + hs * np.arange(-pad, ns + pad + 1)
    return s_ax, y_ax, hy, n


def beam_residual(m: LorentzianMetric, beam: GaussianBeam, lam_list, s_range=None,
                  width_sigmas: float = 5.5, hy_factor: float = 0.3, hs: float = 0.02,
                  order: int = 6, chunk: int = 8) -> ResidualReport:
    """Discrete L^2 norms of Box_g U over a chart grid around gamma, per lambda."""
    halo = 2 * _D1[order][1] * hs
    if s_range is None:
        s_range = (beam.a + halo, beam.b - halo - hs)
    if s_range[0] - halo < beam.a or s_range[1] + halo + hs > beam.b:
        raise DomainError("residual window plus stencil halo must lie inside the beam's s-range")
    lam_list = np.asarray(lam_list, float)
    C = beam.imag_lower_bound(np.linspace(*s_range, 101))
    norms = []
    r2 = 2 * _D1[order][1]
    for lam in lam_list:
        k = abs(beam.kappa) * lam
        width = min(0.5 * beam.delta, width_sigmas / np.sqrt(2 * k * C))
        s_ax, y_ax, hy, n = _chart_grid(beam, lam, s_range, width, hy_factor, hs)
        steps = [hs] + [hy] * n
        total = 0.0
        # slabs in s keep the memory footprint bounded
        for i0 in range(r2, len(s_ax) - r2, chunk):
            i1 = min(i0 + chunk, len(s_ax) - r2)
            mesh = np.meshgrid(s_ax[i0 - r2:i1 + r2], *([y_ax] * n), indexing="ij")
            S = mesh[0]
            Yc = np.stack(mesh[1:], axis=-1)
            del mesh
            U = beam.eval_sy(S, Yc, lam)
            if beam.chart.flat:
                R = chart_wave_operator(U, steps, order=order)
                vol = 1.0
            else:
                G = beam.chart.chart_metric(S, Yc)
                Ginv = np.linalg.inv(G)
                sq = np.sqrt(np.abs(np.linalg.det(G)))
                del G
                R = chart_wave_operator(U, steps, Ginv, sq, order=order)
                vol = _trim(sq, range(n + 1), r2)
            total += np.sum(np.abs(R) ** 2 * vol)
        norms.append(np.sqrt(total * hs * hy ** n))
    norms = np.asarray(norms)
    if np.all(norms == 0):
        slope = 0.0
    else:
        slope = float(np.polyfit(np.log(lam_list), np.log(norms), 1)[0])
    return ResidualReport(lam_list, norms, slope, truncated_residual_exponent(beam.n))


# -- sources ---------------------------------------------------------------------------

def source_norm_exponent(n: int) -> float:
    """||f^+||_{L^2} ~ lam^p: the cutoff derivative hits the phase once (lam^1)
    on a Gaussian tube of transverse width lam^{-1/2} (lam^{-n/4} in L^2)."""
    return 1.0 - n / 4.0


class BeamSource:
    """f^+ = zeta_+ Box(zeta_- Re U) (forward) or f^- = zeta_- Box(zeta_+ Re U) (backward)."""

    def __init__(self, beam: GaussianBeam, kind: str = "forward", delta: float | None = None,
                 q0: float | None = None):
        if kind not in ("forward", "backward"):
            raise DomainError("kind must be 'forward' or 'backward'")
        self.beam = beam
        self.kind = kind
        self.delta = beam.delta if delta is None else float(delta)
        self.q0 = float(beam.chart.v.x[0]) if q0 is None else float(q0)

    def inner_cutoff(self, x0):
        """Cutoff applied before the wave operator."""
        if self.kind == "forward":
            return zeta_minus(x0, self.q0, self.delta)
        return zeta_plus(x0, self.q0, self.delta)

    def outer_cutoff(self, x0):
        if self.kind == "forward":
            return zeta_plus(x0, self.q0, self.delta)
        return zeta_minus(x0, self.q0, self.delta)

    def window(self):
        return self.q0 - self.delta, self.q0

    def truncated_field(self, x, lam=None):
        """Inner cutoff times Re U at spacetime points."""
        x = np.asarray(x, float)
        return self.inner_cutoff(x[..., 0]) * np.real(self.beam(x, lam))

    def evaluate(self, x, lam=None, h=1e-3):
        """Pointwise f(x) via fourth-order differences of Box_g in spacetime coordinates."""
        x = np.atleast_2d(np.asarray(x, float))
        m = self.beam.metric
        d = m.dim
        outer = self.outer_cutoff(x[:, 0])
        out = np.zeros(len(x))
        live = outer != 0
        if not np.any(live):
            return out
        X = x[live]
        w = lambda p: self.truncated_field(p, lam)
        w0 = w(X)
        grad = np.zeros((len(X), d))
        hess = np.zeros((len(X), d, d))
        E = np.eye(d) * h
        for a in range(d):
            fp, fm = w(X + E[a]), w(X - E[a])
            f2p, f2m = w(X + 2 * E[a]), w(X - 2 * E[a])
            grad[:, a] = (8 * (fp - fm) - (f2p - f2m)) / (12 * h)
            hess[:, a, a] = (-f2p + 16 * fp - 30 * w0 + 16 * fm - f2m) / (12 * h * h)
            for b in range(a + 1, d):
                val = 0.0
                for i, j, c in ((1, 1, 8), (1, -1, -8), (-1, 1, -8), (-1, -1, 8),
                                (2, 2, -1), (2, -2, 1), (-2, 2, 1), (-2, -2, -1)):
                    val = val + c * w(X + i * E[a] + j * E[b])
                hess[:, a, b] = hess[:, b, a] = val / (48 * h * h)
        gi = m.ginv(X)
        gam = m.christoffel(X)
        box = np.einsum("kab,kab->k", gi, hess) - np.einsum("kab,kcab,kc->k", gi, gam, grad)
        out[live] = outer[live] * box
        return out

    def l2_norm(self, lam=None, width_sigmas=5.5, hy_factor=0.5, hs=0.005, order=6,
                chunk=8) -> float:
        """Discrete L^2 norm of f on a chart-aligned grid covering the source window.

        Only for flat charts, where the chart is affine with constant volume density.
        """
        beam = self.beam
        if not beam.chart.flat:
            raise DomainError("chart-grid source norms need an affine chart")
        lam = beam.lam if lam is None else lam
        k = abs(beam.kappa) * lam
        # x^0 is affine in (s, y') on the chart; bracket the window in s
        Lt = beam.chart._L[0]
        Et = beam.chart._E[:, 0]
        lo_t, hi_t = self.window()
        x00 = beam.chart._x0[0]
        width = 0.5 * beam.delta
        for _ in range(2):
            slack = np.sum(np.abs(Et)) * width
            s_lo = (lo_t - x00 - slack) / Lt
            s_hi = (hi_t - x00 + slack) / Lt
            C = beam.imag_lower_bound(np.linspace(s_lo, s_hi, 51))
            width = min(0.5 * beam.delta, width_sigmas / np.sqrt(2 * k * C))
        s_ax, y_ax, hy, n = _chart_grid(beam, lam, (s_lo, s_hi), width, hy_factor, hs)
        r2 = 2 * _D1[order][1]
        steps = [hs] + [hy] * n
        total = 0.0
        for i0 in range(r2, len(s_ax) - r2, chunk):
            i1 = min(i0 + chunk, len(s_ax) - r2)
            mesh = np.meshgrid(s_ax[i0 - r2:i1 + r2], *([y_ax] * n), indexing="ij")
            S = mesh[0]
            Yc = np.stack(mesh[1:], axis=-1)
            del mesh
            x0 = beam.chart.forward(S, Yc)[..., 0]
            w = self.inner_cutoff(x0) * np.real(beam.eval_sy(S, Yc, lam))
            box = chart_wave_operator(w, steps, order=order)
            f = self.outer_cutoff(_trim(x0, range(n + 1), r2)) * box
            total += np.sum(f ** 2)
        jac = abs(np.linalg.det(np.column_stack([beam.chart._L, beam.chart._E.T])))
        return float(np.sqrt(total * hs * hy ** n * jac))


def build_source(beam: GaussianBeam, kind: str = "forward", delta: float | None = None,
                 region=None) -> BeamSource:
    """Source whose solution tracks the cut-off real beam; region = (t_lo, t_hi) window check."""
    src = BeamSource(beam, kind, delta)
    if region is not None:
        lo, hi = src.window()
        if lo < region[0] - 1e-12 or hi > region[1] + 1e-12:
            raise DomainError(f"source window [{lo}, {hi}] outside region time extent {tuple(region)}")
    return src


# -- conformal matching -------------------------------------------------------------

def _chart_frame(chart: FermiChart, s: float):
    """Columns gamma', E_1..E_n at s."""
    s = np.asarray(s, float)
    return np.column_stack([chart.gamma_dot(s), chart.frame(s).T])


def phase_hessian_x(beam: GaussianBeam, s: float) -> np.ndarray:
    """Covariant Hessian of the beam phase at gamma(s) in spacetime coordinates."""
    B = _chart_frame(beam.chart, s)
    n = beam.n
    K = np.zeros((n + 1, n + 1), complex)
    K[1:, 1:] = 2.0 * beam.riccati.H(np.array([s]))[0]
    Binv = np.linalg.inv(B)
    return Binv.T @ K @ Binv


def matched_conformal_beam(hat_beam: GaussianBeam, g: LorentzianMetric, c: ScalarField,
                           s_range, delta: float | None = None, kappa=None, lam=None,
                           chart_delta: float | None = None) -> GaussianBeam:
    """Beam for g = c ghat with the same phase function as hat_beam near its base point.

    The base vector becomes xi/c(q) (so the phase differential is unchanged), H is the
    g-covariant Hessian of the hat phase on the g-frame, and Y(0) is scaled so that
    a00(q) = c(q)^{-(n-1)/4} ahat00(q).
    """
    hm = hat_beam.metric
    n = hat_beam.n
    q = hat_beam.chart.v.x
    xi = hat_beam.chart.v.xi
    cq = float(c.value(q))
    v = TangentVector(hat_beam.chart.v.base, xi / cq)
    delta = hat_beam.delta if delta is None else delta
    chart = build_fermi_chart(g, v, s_range, delta if chart_delta is None else chart_delta)
    hess_hat = phase_hessian_x(hat_beam, 0.0)
    dphi = hm.g(q) @ xi
    dgam = g.christoffel(q) - hm.christoffel(q)
    hess_g = hess_hat - np.einsum("cab,c->ab", dgam, dphi)
    E = chart.frame(np.array(0.0))
    Hg = 0.5 * E @ hess_g @ E.T
    Hg = 0.5 * (Hg + Hg.T)
    ahat = hat_beam.riccati.a00(np.array(0.0))
    target = cq ** (-(n - 1) / 4.0) * ahat
    log_alpha = -2.0 / n * np.log(target)
    alpha = np.exp(log_alpha)
    Y0 = alpha * np.eye(n)
    Z0 = Hg @ Y0
    return build_beam(g, v, hat_beam.kappa if kappa is None else kappa,
                      hat_beam.lam if lam is None else lam, (Y0, Z0), delta, s_range,
                      chart=chart, log_det_init=n * log_alpha, scale=hat_beam.scale)
