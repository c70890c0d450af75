import mpmath as mp
import numpy as np
import pytest
from scipy import integrate

from polaron_eet.baths import (
    PhononBathSpec,
    PhotonCorrelators,
    SpectralTable,
    _e0_e1,
    _trigamma,
    beta_hop,
    beta_mixed,
    beta_same,
    edge_taper,
    fourier_piecewise_linear,
    frequency_grid,
    golden_rule_rate,
    phonon_phi_static,
    phonon_phi_tau,
    photon_spectral_table,
    polaron_quantities,
    polaron_shift,
    spectral_time_integral,
)
from polaron_eet.medium import HBAR, K_B, FilmGeometry, boltzmann_ratio, planck_occupation

from conftest import SILVER, SMALL_GRID, dimer

mp.mp.dps = 30


def phi_oracle(spec, tau):
    """Direct quadrature of J/w^2 [coth cos - i sin] in x = w / w_c."""
    th = spec.theta

    def f(x, part):
        c = mp.coth(x / (2 * th)) if th > 0 else 1
        s = spec.omega_c * tau
        g = c * mp.cos(x * s) if part == 0 else -mp.sin(x * s)
        return spec.gamma * x * mp.e**(-x) * g

    pts = [0] + [0.5 * k for k in range(1, 161)] + [mp.inf]
    re = mp.quad(lambda x: f(x, 0), pts)
    im = mp.quad(lambda x: f(x, 1), pts)
    return complex(re, im)


def test_trigamma_matches_mpmath():
    for w in (1.2, 3.0 - 2.0j, 1.5 - 40j, 25 + 3j):
        assert complex(_trigamma(w)) == pytest.approx(complex(mp.psi(1, w)), rel=1e-13)


@pytest.mark.parametrize("gamma,T", [(0.1, 300.0), (1.0, 300.0), (0.5, 77.0)])
def test_phi_static_oracle(gamma, T):
    spec = PhononBathSpec(gamma, 2e13, T)
    assert phonon_phi_static(spec) == pytest.approx(phi_oracle(spec, 0.0).real, rel=1e-10)
    assert phonon_phi_tau(spec, 0.0) == pytest.approx(phonon_phi_static(spec), rel=1e-12)


def test_phi_zero_temperature():
    spec = PhononBathSpec(0.3, 2e13, 0.0)
    assert phonon_phi_static(spec) == pytest.approx(0.3, rel=1e-15)


@pytest.mark.parametrize("s", [1.0, 5.0, 37.0])
def test_phi_tau_oracle(s):
    spec = PhononBathSpec(1.0, 2e13, 300.0)
    tau = s / spec.omega_c
    assert complex(phonon_phi_tau(spec, tau)) == pytest.approx(phi_oracle(spec, tau), rel=1e-8, abs=1e-12)


def test_polaron_shift_quadrature():
    spec = PhononBathSpec(1.0, 2e13, 300.0)
    wc = spec.omega_c
    val, _ = integrate.quad(lambda x: spec.spectral_density(x * wc) / x, 0, np.inf, epsrel=1e-13)
    assert polaron_shift(spec) == pytest.approx(val, rel=1e-10)
    assert polaron_shift(spec) == 4e13


def test_phonon_correlators_symmetry_and_values():
    spec = PhononBathSpec(0.1, 2e13, 300.0)
    pq = polaron_quantities(spec)
    tau = np.linspace(0, 2e-12, 101)
    phi = phonon_phi_tau(spec, tau)
    np.testing.assert_allclose(phonon_phi_tau(spec, -tau), np.conj(phi), rtol=1e-14)
    assert beta_hop(pq, phi[0]) == pytest.approx(pq.B_avg**4 * (np.exp(2 * pq.phi_static) - 1))
    assert beta_mixed(pq, phi[0]).imag == 0
    assert beta_same(pq, phi[0]) < 0
    assert pq.B_avg == pytest.approx(np.exp(-pq.phi_static / 2))


def test_gamma_zero_trivial():
    pq = polaron_quantities(PhononBathSpec(0.0))
    assert pq.B_avg == 1 and pq.Delta == 0
    assert np.all(phonon_phi_tau(PhononBathSpec(0.0), np.linspace(0, 1e-12, 5)) == 0)


def test_e0_e1_against_quadrature():
    for y in (0.0, 1e-3, 0.49, 0.51, 3.0, -7.5, 120.0):
        e0, e1 = _e0_e1(np.array([y]))
        r0 = integrate.quad(lambda s: np.cos(y * s), 0, 1, epsabs=1e-15)[0] - 1j * integrate.quad(lambda s: np.sin(y * s), 0, 1, epsabs=1e-15)[0]
        r1 = integrate.quad(lambda s: s * np.cos(y * s), 0, 1, epsabs=1e-15)[0] - 1j * integrate.quad(lambda s: s * np.sin(y * s), 0, 1, epsabs=1e-15)[0]
        assert e0[0] == pytest.approx(r0, abs=1e-14)
        assert e1[0] == pytest.approx(r1, abs=1e-14)


def test_fourier_piecewise_linear_exact():
    # a hat-shaped spectrum has a closed-form transform
    w = np.array([1.0, 2.0, 3.0])
    v = np.array([0.0, 1.0, 0.0])
    t = np.array([0.0, 0.7, 5.0])
    exact = np.exp(-2j * t) * np.where(t == 0, 1.0, (np.sin(t / 2) / np.where(t == 0, 1, t / 2)) ** 2)
    np.testing.assert_allclose(fourier_piecewise_linear(w, v, t, sign=-1), exact, atol=1e-14)
    np.testing.assert_allclose(fourier_piecewise_linear(w, v, t, sign=+1), np.conj(exact), atol=1e-14)


def test_spectral_time_integral_brute_force():
    w = np.linspace(1.0, 3.0, 41)
    v = np.exp(-((w - 2.0) ** 2) * 4)
    c, t = 1.8, 6.0
    tau = np.linspace(0, t, 20001)
    f = fourier_piecewise_linear(w, v, tau, sign=-1) * np.exp(1j * c * tau)
    brute = integrate.trapezoid(f, tau)
    assert spectral_time_integral(w, v, c, +1, t) == pytest.approx(brute, rel=1e-7)


def test_edge_taper_and_grid():
    w = frequency_grid(5e14, 1.2e16, 512, center=3.25e15, halfwidth=3.4e14, refine=4)
    assert np.all(np.diff(w) > 0)
    base = (1.2e16 - 5e14) / 511
    assert np.min(np.diff(w)) == pytest.approx(base / 4, rel=1e-6)
    tap = edge_taper(w, 0.02)
    assert tap[0] == 0 and tap[-1] == 0
    assert np.all(tap[(w > 1e15) & (w < 1.1e16)] == 1)
    with pytest.raises(ValueError):
        frequency_grid(2.0, 1.0)


def test_photon_table_structure(small_table):
    t = small_table
    np.testing.assert_array_equal(t.S["DD"], t.S["AA"])
    np.testing.assert_array_equal(t.S["DA"], t.S["AD"])
    assert np.all(t.S["DD"] > 0)
    # Cauchy-Schwarz on the cross-spectral density
    assert np.all(np.abs(t.S["DA"]) <= t.S["DD"] * (1 + 1e-12))


def test_photon_table_zero_dipole():
    D, A = dimer(mu_D=0.0)
    w = np.linspace(2e15, 4e15, 17)
    t = photon_spectral_table(D, A, FilmGeometry(10e-9), SILVER, w)
    assert np.all(t.S["DD"] == 0) and np.all(t.S["DA"] == 0)
    assert np.all(t.S["AA"] > 0)


def test_table_csv_round_trip(small_table, tmp_path):
    p = tmp_path / "t.csv"
    small_table.to_csv(p)
    back = SpectralTable.from_csv(p)
    for k in ("DD", "DA", "AA"):
        np.testing.assert_array_equal(back.S[k], small_table.S[k])
    np.testing.assert_array_equal(back.omega, small_table.omega)


def test_kms_detailed_balance(small_table):
    c = PhotonCorrelators(small_table, 300.0, 2.98e15)
    w = small_table.omega
    inner = c.window > 0
    ratio = c.absorption["DD"][inner] / c.emission["DD"][inner]
    np.testing.assert_allclose(ratio, boltzmann_ratio(w[inner], 300.0), rtol=1e-12)
    n = planck_occupation(w, 300.0)
    np.testing.assert_allclose(n / (1 + n), np.exp(-HBAR * w / (K_B * 300.0)), rtol=1e-12)


def test_photon_correlators_hermitian_and_decay(small_table):
    c = PhotonCorrelators(small_table, 300.0, 2.98e15)
    tau = np.linspace(0, 3e-13, 7)
    for p in ("DD", "DA"):
        np.testing.assert_allclose(c.alpha(p, -tau), np.conj(c.alpha(p, tau)), rtol=1e-12)
        np.testing.assert_allclose(c.alpha_bar(p, -tau), np.conj(c.alpha_bar(p, tau)), rtol=1e-12)
        assert abs(c.alpha(p, 8e-12)) < 1e-4 * abs(c.alpha(p, 0.0))


def test_alpha_integral_is_antiderivative(small_table):
    c = PhotonCorrelators(small_table, 300.0, 2.98e15)
    nu, t, h = 3e13, 4e-14, 1e-18
    d = (c.alpha_integral("DD", nu, t + h) - c.alpha_integral("DD", nu, t - h)) / (2 * h)
    assert d == pytest.approx(c.alpha("DD", t) * np.exp(1j * nu * t), rel=1e-6)


def test_alpha_integral_markov_limit(small_table):
    c = PhotonCorrelators(small_table, 300.0, 2.98e15)
    val = c.alpha_integral("DD", 0.0, 8e-12)
    rate = golden_rule_rate(small_table, "DD", 2.98e15, 300.0)
    assert 2 * val.real == pytest.approx(rate, rel=1e-3)
