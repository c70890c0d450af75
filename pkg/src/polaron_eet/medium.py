"""Physical constants, material models and wave-vector algebra."""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

import numpy as np
from scipy import constants as _sc

# Single source for every constant used in the package.
CONSTANTS = MappingProxyType(
    {
        "c": _sc.c,
        "hbar": _sc.hbar,
        "eps0": _sc.epsilon_0,
        "k_B": _sc.k,
        "debye": 3.33564e-30,
    }
)

C = CONSTANTS["c"]
HBAR = CONSTANTS["hbar"]
EPS0 = CONSTANTS["eps0"]
K_B = CONSTANTS["k_B"]
DEBYE = CONSTANTS["debye"]


@dataclass(frozen=True)
class DrudeMetal:
    """Free-electron metal: plasma frequency and scattering rate in rad/s."""

    omega_p: float
    nu: float

    def __post_init__(self):
        if not self.omega_p > 0:
            raise ValueError(f"omega_p must be positive, got {self.omega_p}")
        if not self.nu > 0:
            raise ValueError(
                "lossless Drude metal (nu <= 0) is not supported; "
                f"got nu={self.nu}"
            )

    def permittivity(self, omega):
        return drude_permittivity(self, omega)

    def surface_plasmon_frequency(self, eps1: float = 1.0) -> float:
        """Frequency where Re eps(omega) = -eps1."""
        return float(np.sqrt(self.omega_p**2 / (1.0 + eps1) - self.nu**2))


@dataclass(frozen=True)
class Dielectric:
    """Constant permittivity stand-in for the film (used for no-contrast checks)."""

    eps: complex

    def permittivity(self, omega):
        omega = np.asarray(omega, dtype=float)
        if np.any(omega <= 0):
            raise ValueError("omega must be positive")
        return np.full(omega.shape, complex(self.eps))[()]


@dataclass(frozen=True)
class FilmGeometry:
    """Film of thickness ``a`` on -a <= z <= 0 embedded in permittivity ``eps1``."""

    a: float
    eps1: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"film thickness must be positive, got {self.a}")
        if not self.eps1 >= 1:
            raise ValueError(f"eps1 must be >= 1, got {self.eps1}")

    def k1(self, omega):
        return np.sqrt(self.eps1) * np.asarray(omega) / C


@dataclass(frozen=True)
class DipoleSite:
    r: tuple
    n: tuple
    mu: float
    omega0: float

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        n = np.asarray(self.n, dtype=float)
        if r.shape != (3,) or n.shape != (3,):
            raise ValueError("r and n must be 3-vectors")
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError(f"orientation must be a unit vector, |n|={np.linalg.norm(n)}")
        if self.mu < 0:
            raise ValueError("dipole magnitude must be non-negative")
        if not self.omega0 > 0:
            raise ValueError("transition frequency must be positive")
        if not r[2] > 0:
            raise ValueError("dipole sites must lie above the film (z > 0)")
        object.__setattr__(self, "r", tuple(r))
        object.__setattr__(self, "n", tuple(n))

    @property
    def position(self) -> np.ndarray:
        return np.array(self.r)

    @property
    def orientation(self) -> np.ndarray:
        return np.array(self.n)

    @property
    def energy(self) -> float:
        """Site energy hbar*omega0 in joules."""
        return HBAR * self.omega0


def drude_permittivity(metal: DrudeMetal, omega):
    """eps(omega) = 1 - omega_p**2 / (omega**2 + i nu omega)."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("omega must be positive")
    eps = 1.0 - metal.omega_p**2 / (omega**2 + 1j * metal.nu * omega)
    return eps[()]


def axial_wavevector(eps, omega, p):
    """z-component of the wave vector, sqrt(eps omega^2/c^2 - p^2).

    The branch is fixed so that Im q >= 0, and Re q >= 0 when q is real.
    """
    omega = np.asarray(omega, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("omega must be positive")
    if np.any(p < 0):
        raise ValueError("p must be non-negative")
    q = np.sqrt(np.asarray(eps, dtype=complex) * (omega / C) ** 2 - p**2 + 0j)
    # numpy's principal root has Re q >= 0; flip onto the decaying sheet.
    q = np.where(q.imag < 0, -q, q)
    q = np.where((q.imag == 0) & (q.real < 0), -q, q)
    return q[()]


def planck_occupation(omega, T):
    """Bose-Einstein occupation 1/(exp(hbar omega / k_B T) - 1)."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("omega must be positive")
    if not T > 0:
        raise ValueError("temperature must be positive")
    with np.errstate(over="ignore"):  # deep Boltzmann tail: 1/inf = 0
        return (1.0 / np.expm1(HBAR * omega / (K_B * T)))[()]


def boltzmann_ratio(omega, T):
    """exp(-hbar omega / k_B T), the detailed-balance weight."""
    return np.exp(-HBAR * np.asarray(omega, dtype=float) / (K_B * T))[()]
