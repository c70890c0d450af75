"""Slab Fresnel coefficients and dyadic Green's functions above a thin film.

Scattering Green's functions are Sommerfeld integrals over the transverse
wave number p. The angular integral is done analytically (Bessel J0/J2) and
the p-integral is split at k1 = sqrt(eps1) omega / c. Both pieces are mapped
onto variables that remove the 1/q1 branch point:

    propagating  p = k1 sin(t),  t in [0, pi/2]
    evanescent   p = k1 cosh(u), u in [0, arccosh(p_max / k1)]

All Green's functions are in 1/m with Im G_ii(r, r) = k1 / (6 pi) in free space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.integrate import quad, quad_vec

from .medium import C, EPS0, HBAR, DipoleSite, FilmGeometry, axial_wavevector

COMPONENTS = ("xx", "zz")


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message, estimate=None, error=None):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


@dataclass(frozen=True)
class QuadratureSpec:
    rel_tol: float = 1e-10
    pmax_k1: float = 10.0  # p_max >= pmax_k1 * k1
    pmax_z: float = 40.0  # p_max >= pmax_z / (z + z')
    limit: int = 2000
    mode: str = "bessel-reduced"

    def __post_init__(self):
        if not 0 < self.rel_tol <= 1e-3:
            raise ValueError("rel_tol must lie in (0, 1e-3]")
        if self.mode not in ("bessel-reduced", "direct-2d"):
            raise ValueError(f"unknown quadrature mode {self.mode!r}")

    def p_max(self, k1, Z):
        return np.maximum(self.pmax_k1 * k1, self.pmax_z / Z)


DEFAULT_QUAD = QuadratureSpec()


@dataclass(frozen=True)
class GreensComponent:
    value: complex
    component: str
    kind: str

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unsupported component {self.component!r}")
        if self.kind not in ("scattering", "free", "total"):
            raise ValueError(f"unknown kind {self.kind!r}")

    def __add__(self, other):
        if not isinstance(other, GreensComponent) or other.component != self.component:
            return NotImplemented
        if {self.kind, other.kind} != {"free", "scattering"}:
            raise ValueError("total = free + scattering only")
        return GreensComponent(self.value + other.value, self.component, "total")


# --------------------------------------------------------------------------
# Fresnel coefficients


def _cot(x):
    """cot(x) through exponentials, rescaled so that large |Im x| cannot overflow."""
    x = np.asarray(x, dtype=complex)
    upper = x.imag >= 0
    e = np.exp(np.where(upper, 2j * x, -2j * x))
    return np.where(upper, 1j * (e + 1) / (e - 1), 1j * (1 + e) / (1 - e))


def _slab_coefficients(eps1, eps2, k0, p, q1, q2, a):
    """(r_s, r_p) for a film of thickness a; squares are formed from eps and p directly."""
    k0sq = k0 * k0
    psq = p * p
    cot = _cot(q2 * a)
    num_s = (eps1 - eps2) * k0sq
    den_s = (eps1 + eps2) * k0sq - 2 * psq + 2j * q1 * q2 * cot
    num_p = eps1 * eps2 * (eps2 - eps1) * k0sq - (eps2**2 - eps1**2) * psq
    den_p = eps1**2 * (eps2 * k0sq - psq) + eps2**2 * (eps1 * k0sq - psq) + 2j * eps1 * eps2 * q1 * q2 * cot
    return num_s / den_s, num_p / den_p


def _check_p(p):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("p must be non-negative")
    return p


def fresnel_slab_s(geom: FilmGeometry, eps2, omega, p):
    """TE reflection coefficient of the film."""
    p = _check_p(p)
    q1 = axial_wavevector(geom.eps1, omega, p)
    q2 = axial_wavevector(eps2, omega, p)
    rs, _ = _slab_coefficients(geom.eps1, complex(eps2), omega / C, p, q1, q2, geom.a)
    return rs[()]


def fresnel_slab_p(geom: FilmGeometry, eps2, omega, p):
    """TM reflection coefficient of the film."""
    p = _check_p(p)
    q1 = axial_wavevector(geom.eps1, omega, p)
    q2 = axial_wavevector(eps2, omega, p)
    _, rp = _slab_coefficients(geom.eps1, complex(eps2), omega / C, p, q1, q2, geom.a)
    return rp[()]


def halfspace_s(eps1, eps2, omega, p):
    q1 = axial_wavevector(eps1, omega, p)
    q2 = axial_wavevector(eps2, omega, p)
    return (q1 - q2) / (q1 + q2)


def halfspace_p(eps1, eps2, omega, p):
    q1 = axial_wavevector(eps1, omega, p)
    q2 = axial_wavevector(eps2, omega, p)
    return (eps2 * q1 - eps1 * q2) / (eps2 * q1 + eps1 * q2)


# --------------------------------------------------------------------------
# Scattering Green's function


def _planar(r, rp):
    r = np.asarray(r, dtype=float)
    rp = np.asarray(rp, dtype=float)
    if r[2] <= 0 or rp[2] <= 0:
        raise ValueError("both points must lie above the film (z > 0)")
    dx, dy = r[0] - rp[0], r[1] - rp[1]
    if dy != 0 and dx != 0:
        raise NotImplementedError("planar separation must lie along a coordinate axis")
    return float(np.hypot(dx, dy)), float(r[2] + rp[2]), dy != 0


def _bracket(comp, k0, p, q1, rs, rp, prho):
    """Angular-integrated bracket of the Sommerfeld integrand, per unit p/q1."""
    if comp == "zz":
        return 2 * np.pi * p * p * rp * special.j0(prho)
    j0 = special.j0(prho)
    j2 = special.jv(2, prho)
    return np.pi * (k0 * k0 * rs * (j0 + j2) - q1 * q1 * rp * (j0 - j2))


def _integrands(comp, eps1, eps2, a, omega, Z, rho, p_max):
    """Integrands over t (propagating) and v in [0, 1] (evanescent), vectorised over omega."""
    k0 = omega / C
    k1 = np.sqrt(eps1) * k0
    pref = 1j / (8 * np.pi**2 * k0 * k0 * eps1)
    umax = np.arccosh(p_max / k1)

    def prop(t):
        p = k1 * np.sin(t)
        q1 = k1 * np.cos(t) + 0j
        q2 = axial_wavevector(eps2, omega, p)
        rs, rp = _slab_coefficients(eps1, eps2, k0, p, q1, q2, a)
        return pref * k1 * np.sin(t) * np.exp(1j * q1 * Z) * _bracket(comp, k0, p, q1, rs, rp, p * rho)

    def evan(v):
        u = umax * v
        p = k1 * np.cosh(u)
        kappa = k1 * np.sinh(u)
        q1 = 1j * kappa
        q2 = axial_wavevector(eps2, omega, p)
        rs, rp = _slab_coefficients(eps1, eps2, k0, p, q1, q2, a)
        return -1j * pref * k1 * np.cosh(u) * umax * np.exp(-kappa * Z) * _bracket(comp, k0, p, q1, rs, rp, p * rho)

    return prop, evan


def _sommerfeld(comp, geom, eps2, omega, Z, rho, spec, scale, chunk=256):
    eps2 = np.asarray(eps2, dtype=complex)
    omega = np.asarray(omega, dtype=float)
    same = eps2 == geom.eps1
    if np.any(same):
        # no index contrast: both reflection coefficients vanish identically
        out = np.zeros(omega.shape, dtype=complex)
        keep = ~same
        if np.any(keep):
            out[keep] = _sommerfeld(comp, geom, eps2[keep], omega[keep], Z, rho, spec, scale[keep], chunk)
        return out
    if omega.size > chunk:
        # adaptive subdivision is shared by the whole vector: keep blocks small
        # so that resonant frequencies do not refine the quiet ones
        parts = [
            _sommerfeld(comp, geom, eps2[i:i + chunk], omega[i:i + chunk], Z, rho, spec, scale[i:i + chunk], chunk)
            for i in range(0, omega.size, chunk)
        ]
        return np.concatenate(parts)
    k1 = geom.k1(omega)
    prop, evan = _integrands(comp, geom.eps1, eps2, geom.a, omega, Z, rho, spec.p_max(k1, Z))
    total = 0
    for f, lo, hi in ((prop, 0.0, np.pi / 2), (evan, 0.0, 1.0)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            val, err, info = quad_vec(
                lambda x: f(x) / scale, lo, hi, epsabs=0.0, epsrel=spec.rel_tol,
                norm="max", limit=spec.limit, full_output=True,
            )
        if not info.success:
            raise QuadratureError(
                f"Sommerfeld integral did not converge ({info.message})",
                estimate=val * scale, error=err * np.max(np.abs(scale)),
            )
        total = total + val * scale
    return total


def _free_scale(geom, omega, Z):
    """Magnitude guide per omega: quasi-static image field plus free-space Im G."""
    k1 = geom.k1(omega)
    return k1 / (6 * np.pi) + 1.0 / (4 * np.pi * k1 * k1 * Z**3)


def scattering_green_array(comp, geom, eps2, omega, r, rp, spec=DEFAULT_QUAD):
    """Scattering Green's function on an array of frequencies (eps2 given per omega)."""
    if comp not in COMPONENTS:
        raise ValueError(f"unsupported component {comp!r}")
    rho, Z, along_y = _planar(r, rp)
    if along_y and comp == "xx":
        raise NotImplementedError("xx component requires the planar separation along x")
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    eps2 = np.broadcast_to(np.asarray(eps2, dtype=complex), omega.shape)
    if spec.mode == "direct-2d":
        return np.array([_direct_2d(comp, geom, e, w, Z, rho, spec) for e, w in zip(eps2, omega)])
    scale = _free_scale(geom, omega, Z)
    return _sommerfeld(comp, geom, eps2, omega, Z, rho, spec, scale)


def scattering_green(comp, geom, metal, r, rp, omega, spec=DEFAULT_QUAD) -> GreensComponent:
    """Reflected part of G_comp(r, r', omega) for the film described by ``metal``."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    eps2 = metal.permittivity(omega)
    val = scattering_green_array(comp, geom, eps2, omega, r, rp, spec)[0]
    return GreensComponent(complex(val), comp, "scattering")


# --------------------------------------------------------------------------
# brute-force oracle: theta by periodic trapezoid, p by QUADPACK with the
# inverse-square-root endpoint weight, no Bessel functions, no substitution


def _direct_2d(comp, geom, eps2, omega, Z, rho, spec, n_theta=256):
    eps1 = geom.eps1
    k0 = omega / C
    k1 = np.sqrt(eps1) * k0
    pref = 1j / (8 * np.pi**2 * k0 * k0 * eps1)
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    cos2 = np.cos(theta) ** 2
    sin2 = 1 - cos2

    def angular(p, q1):
        q2 = axial_wavevector(eps2, omega, p)
        rs, rp = _slab_coefficients(eps1, eps2, k0, p, q1, q2, geom.a)
        phase = np.exp(1j * p * rho * np.cos(theta))
        if comp == "zz":
            w = p * p * rp * phase
        else:
            w = (k0 * k0 * rs * sin2 - q1 * q1 * rp * cos2) * phase
        return 2 * np.pi * np.mean(w)

    def piece(f, lo, hi, **kw):
        out = 0j
        for part in (np.real, np.imag):
            val, err, *rest = quad(lambda x: part(f(x)), lo, hi, epsabs=0, epsrel=1e-12,
                                   limit=spec.limit, full_output=1, **kw)
            out += val if part is np.real else 1j * val
        return out

    # propagating: 1/q1 = (k1 - p)^(-1/2) (k1 + p)^(-1/2)
    prop = piece(lambda p: pref * p * np.exp(1j * np.sqrt(max(k1 * k1 - p * p, 0.0)) * Z)
                 * angular(p, np.sqrt(max(k1 * k1 - p * p, 0.0)) + 0j) / np.sqrt(k1 + p),
                 0.0, k1, weight="alg", wvar=(0.0, -0.5))
    # evanescent near the branch point: 1/q1 = -i (p - k1)^(-1/2) (p + k1)^(-1/2)
    p_mid = 2 * k1
    near = piece(lambda p: -1j * pref * p * np.exp(-np.sqrt(max(p * p - k1 * k1, 0.0)) * Z)
                 * angular(p, 1j * np.sqrt(max(p * p - k1 * k1, 0.0))) / np.sqrt(p + k1),
                 k1, p_mid, weight="alg", wvar=(-0.5, 0.0))
    p_max = spec.p_max(k1, Z)
    far = piece(lambda p: -1j * pref * p * np.exp(-np.sqrt(max(p * p - k1 * k1, 0.0)) * Z)
                * angular(p, 1j * np.sqrt(max(p * p - k1 * k1, 0.0))) / np.sqrt(max(p * p - k1 * k1, 0.0)),
                p_mid, p_max)
    return prop + near + far


# --------------------------------------------------------------------------
# Free space


def _free_dyadic(eps1, r, rp, omega):
    k = np.sqrt(eps1) * omega / C
    R = np.asarray(r, dtype=float) - np.asarray(rp, dtype=float)
    d = np.linalg.norm(R)
    if d == 0:
        im = k / (6 * np.pi)
        return np.full((3, 3), np.nan) + 1j * im * np.eye(3)
    x = k * d
    rhat = R / d
    if x < 1e-3:
        # series for the imaginary parts; the real parts are exact
        im_t = 2 / 3 - 2 * x * x / 15
        im_l = 2 / 3 - x * x / 15
    else:
        im_t = np.sin(x) / x + np.cos(x) / x**2 - np.sin(x) / x**3
        im_l = 2 * (np.sin(x) / x**3 - np.cos(x) / x**2)
    re_t = np.cos(x) / x - np.sin(x) / x**2 - np.cos(x) / x**3
    re_l = 2 * (np.cos(x) / x**3 + np.sin(x) / x**2)
    ft = re_t + 1j * im_t
    fl = re_l + 1j * im_l
    RR = np.outer(rhat, rhat)
    return k / (4 * np.pi) * (ft * (np.eye(3) - RR) + fl * RR)


def free_space_green(comp, eps1, r, rp, omega) -> GreensComponent:
    """Homogeneous-medium dyadic Green's function component (closed form).

    At r == r' only the imaginary part is finite; the real part is NaN.
    """
    if comp not in COMPONENTS:
        raise ValueError(f"unsupported component {comp!r}")
    if not omega > 0:
        raise ValueError("omega must be positive")
    i = 0 if comp == "xx" else 2
    return GreensComponent(complex(_free_dyadic(eps1, r, rp, omega)[i, i]), comp, "free")


def total_green(comp, geom, metal, r, rp, omega, spec=DEFAULT_QUAD) -> GreensComponent:
    return free_space_green(comp, geom.eps1, r, rp, omega) + scattering_green(
        comp, geom, metal, r, rp, omega, spec
    )


# --------------------------------------------------------------------------
# Derived quantities


def ldos_z(geom, metal, z, omega, spec=DEFAULT_QUAD):
    """z-projected electric LDOS: (absolute value, ratio to free space)."""
    if not z > 0 or not omega > 0:
        raise ValueError("z and omega must be positive")
    r = (0.0, 0.0, z)
    scat = scattering_green("zz", geom, metal, r, r, omega, spec).value.imag
    free = free_space_green("zz", geom.eps1, r, r, omega).value.imag
    absolute = omega / (np.pi * C**2) * (free + scat)
    return absolute, 1.0 + scat / free


def ldos_z_array(geom, eps2, omega, z, spec=DEFAULT_QUAD):
    omega = np.asarray(omega, dtype=float)
    r = (0.0, 0.0, z)
    scat = scattering_green_array("zz", geom, eps2, omega, r, r, spec).imag
    free = np.sqrt(geom.eps1) * omega / C / (6 * np.pi)
    return omega / (np.pi * C**2) * (free + scat), 1.0 + scat / free


def csd_prefactor(omega):
    return HBAR * np.asarray(omega) ** 2 / (EPS0 * C**2)


def cross_spectral_density(geom, metal, r, rp, omega, T=None, spec=DEFAULT_QUAD):
    """zz electric cross-spectral density hbar w^2/(eps0 c^2) Im G_zz(r, r', w).

    ``T`` is accepted for interface symmetry; the thermal factor lives in the
    bath correlators.
    """
    g = total_green("zz", geom, metal, r, rp, omega, spec)
    return complex(csd_prefactor(omega) * g.value.imag)


def dipole_coupling_J(geom, metal, D: DipoleSite, A: DipoleSite, omega, spec=DEFAULT_QUAD):
    """Dipole-dipole coupling (rad/s) from Re of the total Green's function."""
    rD, rA = D.position, A.position
    if np.linalg.norm(rD - rA) <= 1e-6 * max(rD[2], rA[2]):
        raise ValueError("donor and acceptor must not coincide")
    if D.mu == 0 or A.mu == 0:
        return 0.0
    nD, nA = D.orientation, A.orientation
    for comp, axis in (("zz", 2), ("xx", 0)):
        e = np.zeros(3)
        e[axis] = 1.0
        if np.allclose(np.abs(nD), e) and np.allclose(np.abs(nA), e):
            g = total_green(comp, geom, metal, rD, rA, omega, spec).value
            sign = nD[axis] * nA[axis]
            return float(omega**2 * D.mu * A.mu / (C**2 * EPS0) * sign * g.real / HBAR)
    raise NotImplementedError("only parallel x- or z-oriented dipoles are supported")
