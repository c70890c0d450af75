import numpy as np
import pytest

from polaron_eet import config as cf
from polaron_eet.baths import PhononBathSpec, PhotonBathSpec, PhotonCorrelators, photon_spectral_table, polaron_quantities
from polaron_eet.dynamics import BathModel, build_polaron_system
from polaron_eet.greens import QuadratureSpec
from polaron_eet.medium import DEBYE, DipoleSite, DrudeMetal, FilmGeometry

# acceptance lines collected here and echoed in the terminal summary
VERDICTS = []

SILVER = DrudeMetal(4.6e15, 3.4e13)
OMEGA0 = 2 * np.pi * cf.C / 630e-9


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)


def dimer(z=10e-9, d=2e-9, mu_D=1.0, mu_A=1.0):
    D = DipoleSite((-d / 2, 0.0, z), (0, 0, 1), mu_D * DEBYE, OMEGA0)
    A = DipoleSite((d / 2, 0.0, z), (0, 0, 1), mu_A * DEBYE, OMEGA0)
    return D, A


# coarse photon grid for unit tests; the presets use the full one
SMALL_GRID = PhotonBathSpec(n=768, refine=2)


@pytest.fixture(scope="session")
def small_table():
    D, A = dimer()
    geom = FilmGeometry(10e-9)
    w = SMALL_GRID.grid(SILVER)
    return photon_spectral_table(D, A, geom, SILVER, w, QuadratureSpec(rel_tol=1e-8))


def make_model(table, gamma=0.1, J=-1.2e11, omega_ref=None, n_tau=200, tau_max=8e-12, D=None, A=None):
    """System and bath bundle on a given photon table (None: no photons)."""
    if D is None:
        D, A = dimer()
    pq = polaron_quantities(PhononBathSpec(gamma, 2e13, 300.0))
    system = build_polaron_system(D, A, J, pq, omega_ref)
    photons = None if table is None else PhotonCorrelators(table, 300.0, system.omega_ref, 0.02)
    baths = BathModel(PhononBathSpec(gamma, 2e13, 300.0), pq, photons, tau_max=tau_max, n_tau=n_tau)
    return system, baths
