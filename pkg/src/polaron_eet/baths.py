"""Phonon and evanescent-photon bath correlation functions.

The phonon spectral density is super-Ohmic, J(w) = Gamma w^3 / w_c^2 exp(-w / w_c).
With x = w / w_c and theta = k_B T / (hbar w_c) every phonon quantity reduces
to Laplace-type integrals of x exp(-x) that have closed forms in the trigamma
function, which is what the routines below evaluate.

Photon correlators are Fourier integrals of a tabulated spectrum S_ij(w),
interpolated linearly between grid nodes and integrated exactly against the
complex exponential (Filon-type rule), so any tau is accessible without
resolving the optical carrier on a tau grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .greens import DEFAULT_QUAD, free_space_green, scattering_green_array
from .medium import C, EPS0, HBAR, K_B, DipoleSite, FilmGeometry, planck_occupation

PAIRS = ("DD", "DA", "AD", "AA")


# --------------------------------------------------------------------------
# phonons


@dataclass(frozen=True)
class PhononBathSpec:
    gamma: float
    omega_c: float = 2e13
    T: float = 300.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("coupling strength must be non-negative")
        if not self.omega_c > 0:
            raise ValueError("cutoff frequency must be positive")
        if self.T < 0:
            raise ValueError("temperature must be non-negative")

    @property
    def theta(self) -> float:
        return K_B * self.T / (HBAR * self.omega_c)

    def spectral_density(self, omega):
        omega = np.asarray(omega, dtype=float)
        return self.gamma * omega**3 / self.omega_c**2 * np.exp(-omega / self.omega_c)


@dataclass(frozen=True)
class PolaronQuantities:
    phi_static: float
    B_avg: float
    Delta: float


def _trigamma(w):
    """Trigamma function for complex arguments with Re w > 0."""
    w = np.asarray(w, dtype=complex)
    acc = np.zeros_like(w)
    shift = 20
    for k in range(shift):
        acc += 1.0 / (w + k) ** 2
    z = w + shift
    zi = 1.0 / z
    zi2 = zi * zi
    # asymptotic series, error O(|z|^-13) for |z| >= 20
    tail = zi * (1 + zi / 2 + zi2 * (1 / 6 + zi2 * (-1 / 30 + zi2 * (1 / 42 + zi2 * (-1 / 30 + zi2 * 5 / 66)))))
    return acc + tail


def phonon_phi_static(spec: PhononBathSpec) -> float:
    """Integral of J(w)/w^2 coth(hbar w / 2 k_B T) over w > 0."""
    if spec.gamma == 0:
        return 0.0
    th = spec.theta
    if th == 0:
        return float(spec.gamma)
    return float(spec.gamma * (1 + 2 * th * th * special.polygamma(1, 1 + th)))


def polaron_shift(spec: PhononBathSpec) -> float:
    """Integral of J(w)/w, equal to 2 Gamma w_c for the super-Ohmic form."""
    return 2.0 * spec.gamma * spec.omega_c


def polaron_quantities(spec: PhononBathSpec) -> PolaronQuantities:
    phi = phonon_phi_static(spec)
    return PolaronQuantities(phi_static=phi, B_avg=float(np.exp(-phi / 2)), Delta=polaron_shift(spec))


def phonon_phi_tau(spec: PhononBathSpec, tau):
    """phi(tau) = int J/w^2 [coth(beta hbar w/2) cos(w tau) - i sin(w tau)] dw."""
    tau = np.asarray(tau, dtype=float)
    if spec.gamma == 0:
        return np.zeros(tau.shape, dtype=complex)[()]
    s = spec.omega_c * tau
    lead = np.conj(1.0 / (1 - 1j * s) ** 2)
    th = spec.theta
    if th == 0:
        thermal = 0.0
    else:
        # coth = 1 + 2 sum_n exp(-n x / theta)
        thermal = 2 * th * th * np.real(_trigamma(1 + th * (1 - 1j * s)))
    return (spec.gamma * (lead + thermal))[()]


def beta_hop(pq: PolaronQuantities, phi_tau):
    """<B>^4 (exp(2 phi) - 1): correlator of the hopping operators B_DA, B_AD."""
    return pq.B_avg**4 * np.expm1(2 * np.asarray(phi_tau))


def beta_same(pq: PolaronQuantities, phi_tau):
    """<B>^4 (exp(-2 phi) - 1): B_DA with B_DA."""
    return pq.B_avg**4 * np.expm1(-2 * np.asarray(phi_tau))


def beta_mixed(pq: PolaronQuantities, phi_tau):
    """<B>^2 (exp(phi) - 1): same-site B+_0 / B-_0 correlator (cross-site is zero)."""
    return pq.B_avg**2 * np.expm1(np.asarray(phi_tau))


# --------------------------------------------------------------------------
# photons


def frequency_grid(omega_min=5e14, omega_max=1.2e16, n=4096, center=None, halfwidth=None, refine=4):
    """Uniform grid with a band of ``refine``-times denser nodes around ``center``."""
    if not 0 < omega_min < omega_max:
        raise ValueError("need 0 < omega_min < omega_max")
    base = np.linspace(omega_min, omega_max, n)
    if center is None or halfwidth is None:
        return base
    base_step = (omega_max - omega_min) / (n - 1)
    step = base_step / refine
    # start the band on a base node so the union has no sliver cells
    lo = omega_min + np.floor(max(0.0, center - halfwidth - omega_min) / base_step) * base_step
    hi = min(omega_max, center + halfwidth)
    if hi <= lo:
        return base
    band = lo + step * np.arange(int(np.floor((hi - lo) / step)) + 1)
    grid = np.union1d(base, band)
    # drop near-duplicates left by the union
    keep = np.concatenate([[True], np.diff(grid) > step * 1e-6])
    return grid[keep]


@dataclass(frozen=True)
class PhotonBathSpec:
    T: float = 300.0
    omega_min: float = 5e14
    omega_max: float = 1.2e16
    n: int = 4096
    refine: int = 4
    refine_halfwidth_nu: float = 10.0
    taper: float = 0.02  # fraction of the band rolled off at each end

    def __post_init__(self):
        if not self.omega_min > 0:
            raise ValueError("omega_min must be positive")
        if not self.T > 0:
            raise ValueError("photon temperature must be positive")

    def grid(self, metal=None, eps1=1.0):
        center = halfwidth = None
        if metal is not None and hasattr(metal, "surface_plasmon_frequency"):
            center = metal.surface_plasmon_frequency(eps1)
            halfwidth = self.refine_halfwidth_nu * metal.nu
        return frequency_grid(self.omega_min, self.omega_max, self.n, center, halfwidth, self.refine)


@dataclass
class SpectralTable:
    """S_ij(w) in rad/s^2 per rad/s on an increasing frequency grid."""

    omega: np.ndarray
    S: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if np.any(self.omega <= 0) or np.any(np.diff(self.omega) <= 0):
            raise ValueError("frequency grid must be positive and increasing")

    def at(self, pair, omega):
        return np.interp(omega, self.omega, self.S[pair])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# photon spectral densities S_ij(omega) = mu_i mu_j w^2 n_i.Im G.n_j / (eps0 c^2 hbar)\n")
            fh.write("# units: omega rad/s; S rad/s^2 per rad/s\n")
            w = csv.writer(fh)
            w.writerow(["omega", "S_DD", "S_DA", "S_AA"])
            for row in zip(self.omega, self.S["DD"], self.S["DA"], self.S["AA"]):
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", comments="#", skiprows=3)
        S = {"DD": data[:, 1], "DA": data[:, 2], "AD": data[:, 2].copy(), "AA": data[:, 3]}
        return cls(data[:, 0], S)


def _zz_only(site: DipoleSite):
    n = site.orientation
    if not np.allclose(np.abs(n), [0, 0, 1]):
        raise NotImplementedError("photon tables support z-oriented dipoles only")
    return n[2]


def _im_g_zz(geom, metal, omega, r, rp, spec):
    free = np.array([free_space_green("zz", geom.eps1, r, rp, w).value.imag for w in omega])
    eps2 = metal.permittivity(omega)
    scat = scattering_green_array("zz", geom, eps2, omega, r, rp, spec).imag
    return free + scat


def photon_spectral_table(D: DipoleSite, A: DipoleSite, geom: FilmGeometry, metal, omega,
                          spec=DEFAULT_QUAD) -> SpectralTable:
    """Tabulate S_ij(w) = mu_i mu_j w^2 n_i . Im G(r_i, r_j, w) . n_j / (eps0 c^2 hbar)."""
    omega = np.asarray(omega, dtype=float)
    sD, sA = _zz_only(D), _zz_only(A)
    pre = omega**2 / (EPS0 * C**2 * HBAR)
    rD, rA = D.position, A.position
    cache = {}

    def img(r, rp):
        key = (abs(r[0] - rp[0]), abs(r[1] - rp[1]), r[2] + rp[2], r[2] * rp[2])
        if key not in cache:
            cache[key] = _im_g_zz(geom, metal, omega, r, rp, spec)
        return cache[key]

    S = {}
    S["DD"] = pre * D.mu * D.mu * img(rD, rD) if D.mu else np.zeros_like(omega)
    S["AA"] = pre * A.mu * A.mu * img(rA, rA) if A.mu else np.zeros_like(omega)
    if D.mu and A.mu:
        S["DA"] = pre * D.mu * A.mu * sD * sA * img(rD, rA)
    else:
        S["DA"] = np.zeros_like(omega)
    S["AD"] = S["DA"].copy()
    return SpectralTable(omega, S, meta={"z_D": rD[2], "z_A": rA[2], "d": float(np.linalg.norm(rD - rA))})


def edge_taper(omega, fraction):
    """Raised-cosine roll-off over ``fraction`` of the band at both ends."""
    omega = np.asarray(omega, dtype=float)
    if fraction <= 0:
        return np.ones_like(omega)
    lo, hi = omega[0], omega[-1]
    width = fraction * (hi - lo)
    w = np.ones_like(omega)
    left = omega < lo + width
    right = omega > hi - width
    w[left] = 0.5 * (1 - np.cos(np.pi * (omega[left] - lo) / width))
    w[right] = 0.5 * (1 - np.cos(np.pi * (hi - omega[right]) / width))
    return w


# --------------------------------------------------------------------------
# exact integrals of piecewise-linear spectra


_E_TERMS = 16
# series coefficients (-i)^k / (k! (k+1)), (-i)^k / (k! (k+2)), (-i)^k / (k! (k+3))
_E_COEF = [np.array([(-1j) ** k / (math.factorial(k) * (k + m)) for k in range(_E_TERMS)]) for m in (1, 2, 3)]


def _e_moments(y, order=1):
    """E_m = int_0^1 s^m exp(-i y s) ds for m = 0..order (order <= 2)."""
    y = np.asarray(y, dtype=float)
    out = [np.empty(y.shape, dtype=complex) for _ in range(order + 1)]
    small = np.abs(y) < 0.5
    large = ~small
    yl = y[large]
    ex = np.exp(-1j * yl)
    # integration by parts: E_m = i exp(-i y) / y - i m E_{m-1} / y
    prev = (1 - ex) / (1j * yl)
    out[0][large] = prev
    for m in range(1, order + 1):
        prev = 1j * ex / yl - 1j * m * prev / yl
        out[m][large] = prev
    ys = y[small]
    for m in range(order + 1):
        c = _E_COEF[m]
        acc = np.full(ys.shape, c[-1])
        for k in range(_E_TERMS - 2, -1, -1):
            acc = acc * ys + c[k]
        out[m][small] = acc
    return out


def _e0_e1(y):
    """E0 = int_0^1 exp(-i y s) ds and E1 = int_0^1 s exp(-i y s) ds."""
    e0, e1 = _e_moments(y, 1)
    return e0, e1


def fourier_piecewise_linear(omega, values, tau, sign=-1, chunk=256):
    """int values(w) exp(sign i w tau) dw with linear interpolation between nodes."""
    omega = np.asarray(omega, dtype=float)
    values = np.asarray(values)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    h = np.diff(omega)
    va, dv = values[:-1], np.diff(values)
    out = np.empty(tau.shape, dtype=complex)
    for i in range(0, tau.size, chunk):
        t = tau[i:i + chunk, None]
        # substitute tau -> -tau for the + sign: exp(+i w tau) = exp(-i w (-tau))
        tt = -sign * t
        e0, e1 = _e0_e1(h * tt)
        out[i:i + chunk] = (h * np.exp(-1j * omega[:-1] * tt) * (va * e0 + dv * e1)).sum(axis=1)
    return out


def _cin(y):
    """Cin(y) = int_0^y (1 - cos s)/s ds for y >= 0."""
    y = np.asarray(y, dtype=float)
    small = y < 1e-2
    ys = np.where(small, y, 1.0)
    yl = np.where(small, 1.0, y)
    series = ys**2 / 4 - ys**4 / 96 + ys**6 / 4320
    _, ci = special.sici(yl)
    return np.where(small, series, np.euler_gamma + np.log(yl) - ci)


def _sin_minus_arg(y):
    y = np.asarray(y, dtype=float)
    small = np.abs(y) < 1e-2
    ys = np.where(small, y, 0.0)
    series = -(ys**3) / 6 + ys**5 / 120 - ys**7 / 5040
    return np.where(small, series, np.sin(y) - y)


def time_integral_weights(omega, c, sign, t):
    """Cell-wise pieces for int w(omega) G(sign (omega - c), t) d omega.

    G(x, t) = int_0^t exp(-i x tau) d tau. Returns (wa, wb) such that the
    integral equals sum(wa * w[:-1] + wb * w[1:]) for piecewise-linear w.
    """
    omega = np.asarray(omega, dtype=float)
    if t <= 0:
        z = np.zeros(omega.size - 1, dtype=complex)
        return z, z
    x = sign * (omega - c)
    y = x * t
    si, _ = special.sici(y)
    P0 = si - 1j * _cin(np.abs(y))
    P1 = 2 * np.sin(y / 2) ** 2 / t + 1j * _sin_minus_arg(y) / t
    xa, xb = x[:-1], x[1:]
    dP0 = P0[1:] - P0[:-1]
    dP1 = P1[1:] - P1[:-1]
    dx = xb - xa
    lin = (dP1 - xa * dP0) / dx  # weight of the slope term
    # w(x) = w_a + (w_b - w_a)(x - x_a)/dx ; d omega = sign dx
    wa = sign * (dP0 - lin)
    wb = sign * lin
    return wa, wb


def spectral_time_integral(omega, w, c, sign, t):
    """int w(omega) int_0^t exp(-i sign (omega - c) tau) d tau d omega, exact for linear w."""
    wa, wb = time_integral_weights(omega, c, sign, t)
    w = np.asarray(w)
    return complex(np.sum(wa * w[:-1] + wb * w[1:]))


# --------------------------------------------------------------------------
# correlators


@dataclass
class PhotonCorrelators:
    """alpha_ij(0, -tau) and alpha-bar_ij(0, -tau) in internal units (1/s^2).

    ``frame`` is the carrier frequency attached to the field operators; it is
    the rotating-frame reference of the excited manifold.
    """

    table: SpectralTable
    T: float
    frame: float
    taper: float = 0.02

    def __post_init__(self):
        w = self.table.omega
        self.nbar = planck_occupation(w, self.T)
        self.window = edge_taper(w, self.taper)
        self.emission = {p: self.window * self.table.S[p] * (1 + self.nbar) for p in PAIRS}
        self.absorption = {p: self.window * self.table.S[p] * self.nbar for p in PAIRS}

    def alpha(self, pair, tau):
        tau = np.asarray(tau, dtype=float)
        f = fourier_piecewise_linear(self.table.omega, self.emission[pair], tau.ravel(), sign=-1)
        return (np.exp(1j * self.frame * tau.ravel()) * f).reshape(tau.shape)[()]

    def alpha_bar(self, pair, tau):
        tau = np.asarray(tau, dtype=float)
        f = fourier_piecewise_linear(self.table.omega, self.absorption[pair], tau.ravel(), sign=+1)
        return (np.exp(-1j * self.frame * tau.ravel()) * f).reshape(tau.shape)[()]

    def alpha_integral(self, pair, nu, t):
        """int_0^t alpha(0, -tau) exp(i nu tau) d tau."""
        return spectral_time_integral(self.table.omega, self.emission[pair], self.frame + nu, +1, t)

    def alpha_bar_integral(self, pair, nu, t):
        """int_0^t alpha-bar(0, -tau) exp(i nu tau) d tau."""
        return spectral_time_integral(self.table.omega, self.absorption[pair], self.frame - nu, -1, t)


def alpha_corr(corr: PhotonCorrelators, pair, tau):
    return corr.alpha(pair, tau)


def alpha_bar_corr(corr: PhotonCorrelators, pair, tau):
    return corr.alpha_bar(pair, tau)


def golden_rule_rate(table: SpectralTable, pair, omega, T):
    """2 pi S(omega) (1 + nbar(omega)): the Markovian emission rate."""
    return 2 * np.pi * table.at(pair, omega) * (1 + planck_occupation(omega, T))
