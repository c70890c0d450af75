"""Second-order polaron master equation for the {|0>, |D>, |A>} dimer.

The dissipator is time local: d rho/dt = -i[H', rho] - L(t) rho with
L(t) = int_0^t K(tau) d tau, K = K_I + K_II + K_III built from the
double-commutator expansion. The excited block is stored in a frame rotating
at ``omega_ref``; the same frequency is the carrier of the field operators.

Superoperators act on column-major vectorised matrices: A rho B -> (B^T kron A) vec(rho).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baths import (
    PhononBathSpec,
    PhotonCorrelators,
    PolaronQuantities,
    _e0_e1,
    _e_moments,
    beta_hop,
    beta_mixed,
    phonon_phi_tau,
)
from .medium import DipoleSite

SITES = {"D": 1, "A": 2}
I3 = np.eye(3)


class IntegrationError(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ConfigurationError(ValueError):
    pass


def _ket_bra(i, j):
    m = np.zeros((3, 3), dtype=complex)
    m[i, j] = 1.0
    return m


def sigma_plus(site):
    return _ket_bra(SITES[site], 0)


def sigma_minus(site):
    return _ket_bra(0, SITES[site])


def vec(rho):
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v):
    return np.asarray(v).reshape(3, 3, order="F")


def spre(A):
    return np.kron(I3, A)


def spost(B):
    return np.kron(B.T, I3)


def sprepost(A, B):
    return np.kron(B.T, A)


TRACE_ROW = vec(I3).conj()  # Tr(rho) = TRACE_ROW @ vec(rho)


# --------------------------------------------------------------------------
# system


@dataclass(frozen=True)
class PolaronSystem:
    eps_D: float  # polaron-shifted site frequencies (rad/s)
    eps_A: float
    J_prime: float  # renormalised coupling J <B>^2
    J_bare: float
    omega_ref: float
    B_avg: float = 1.0

    def hamiltonian(self):
        """H'_S / hbar in the rotating frame (rad/s)."""
        H = np.zeros((3, 3), dtype=complex)
        H[1, 1] = self.eps_D - self.omega_ref
        H[2, 2] = self.eps_A - self.omega_ref
        H[1, 2] = H[2, 1] = self.J_prime
        return H

    def eigensystem(self):
        E, V = np.linalg.eigh(self.hamiltonian())
        return E, V


def build_polaron_system(D: DipoleSite, A: DipoleSite, J_DA: float, polaron: PolaronQuantities,
                         omega_ref=None) -> PolaronSystem:
    eD = D.omega0 - polaron.Delta
    eA = A.omega0 - polaron.Delta
    if omega_ref is None:
        omega_ref = 0.5 * (eD + eA)
    return PolaronSystem(eD, eA, J_DA * polaron.B_avg**2, J_DA, omega_ref, polaron.B_avg)


def interaction_sigma(sys: PolaronSystem, tau):
    """sigma~^{+/-}_j(-tau) = exp(-i H tau) sigma exp(i H tau), keyed ('+', 'D') etc."""
    E, V = sys.eigensystem()
    U = (V * np.exp(-1j * E * tau)) @ V.conj().T
    out = {}
    for s in SITES:
        m = U @ sigma_minus(s) @ U.conj().T
        out[("-", s)] = m
        out[("+", s)] = m.conj().T
    return out


def bohr_components(sys: PolaronSystem, O):
    """Split O~(-tau) = sum_nu exp(i nu tau) M_nu over Bohr frequencies nu = E_l - E_k."""
    E, V = sys.eigensystem()
    comps = []
    for k in range(3):
        for l in range(3):
            Pk = np.outer(V[:, k], V[:, k].conj())
            Pl = np.outer(V[:, l], V[:, l].conj())
            M = Pk @ O @ Pl
            if np.max(np.abs(M)) > 1e-14:
                comps.append((E[l] - E[k], M))
    return comps


# --------------------------------------------------------------------------
# bath bundle


def graded_tau_grid(tau_max, tau_fine, n):
    """Nodes on [0, tau_max]: n steps over [0, tau_fine], then n per octave.

    The phonon factors vary on the thermal time early and decay as tau^-2
    later, so the step may double with tau at fixed interpolation error.
    """
    if not (tau_max > 0 and tau_fine > 0 and n >= 1):
        raise ValueError("tau grid needs tau_max, tau_fine > 0 and n >= 1")
    edges = [0.0, min(tau_fine, tau_max)]
    while edges[-1] < tau_max:
        edges.append(min(2 * edges[-1], tau_max))
    nodes = [np.linspace(edges[0], edges[1], n + 1)]
    for lo, hi in zip(edges[1:-1], edges[2:]):
        full = lo  # step of a full octave block
        k = max(1, int(round(n * (hi - lo) / full)))
        nodes.append(np.linspace(lo, hi, k + 1)[1:])
    return np.concatenate(nodes)


@dataclass
class BathModel:
    """Everything the kernel needs: polaron data, phonon correlators, photon correlators."""

    phonon: PhononBathSpec
    polaron: PolaronQuantities
    photons: PhotonCorrelators | None
    tau_max: float = 8e-12
    n_tau: int = 1000  # segments per octave of the tau grid
    tau_fine: float = 2e-13  # extent of the first, finest block
    _phi_cache: dict = field(default_factory=dict, repr=False)

    @property
    def tau_grid(self):
        return graded_tau_grid(self.tau_max, self.tau_fine, self.n_tau)

    def phi(self, tau):
        return phonon_phi_tau(self.phonon, tau)

    def grid_phi(self):
        if "grid" not in self._phi_cache:
            self._phi_cache["grid"] = self.phi(self.tau_grid)
        return self._phi_cache["grid"]

    def beta_hop(self, tau):
        return beta_hop(self.polaron, self.phi(tau))

    def beta_mixed(self, tau):
        return beta_mixed(self.polaron, self.phi(tau))

    def correlator(self, name, pair, tau):
        """Scalar correlator at (0, -tau)."""
        if name == "beta_hop":
            return self.beta_hop(tau)
        if self.photons is None:
            return 0.0 * np.asarray(tau, dtype=complex)
        if name == "alpha":
            return self.photons.alpha(pair, tau)
        if name == "alpha_bar":
            return self.photons.alpha_bar(pair, tau)
        if name == "mix_alpha":
            return self.beta_mixed(tau) * self.photons.alpha(pair, tau)
        if name == "mix_alpha_bar":
            return self.beta_mixed(tau) * self.photons.alpha_bar(pair, tau)
        raise KeyError(name)

    def check_decay(self, threshold=1e-4):
        """Relative magnitude |f(tau_max)| / |f(0)| for every correlator; raise if not decayed."""
        out = {}
        fns = {"beta_hop": lambda t: self.beta_hop(t), "beta_mixed": lambda t: self.beta_mixed(t)}
        if self.photons is not None:
            for p in ("DD", "DA", "AA"):
                fns[f"alpha_{p}"] = lambda t, p=p: self.photons.alpha(p, t)
                fns[f"alpha_bar_{p}"] = lambda t, p=p: self.photons.alpha_bar(p, t)
        for name, f in fns.items():
            f0 = abs(f(0.0))
            out[name] = 0.0 if f0 == 0 else float(abs(f(self.tau_max)) / f0)
        bad = {k: v for k, v in out.items() if v >= threshold}
        if bad:
            raise ConfigurationError(f"correlators not decayed by tau_max={self.tau_max:g} s: {bad}")
        return out


# --------------------------------------------------------------------------
# the three expansions, transcribed group by group
#
# a term is (correlator, pair, conjugated, sign, slot, bare operator, tilde operator)
# slots: "XO.r" = X O~ rho, "X.r.O" = X rho O~, "O.r.X" = O~ rho X, "r.OX" = rho O~ X
# conjugated terms carry f(-tau, 0) = f(0, -tau)^*


def _terms_I():
    pDmA = sigma_plus("D") @ sigma_minus("A")
    pAmD = sigma_plus("A") @ sigma_minus("D")
    b = "beta_hop"
    return [
        (b, None, False, +1, "XO.r", pDmA, pAmD),
        (b, None, False, +1, "XO.r", pAmD, pDmA),
        (b, None, True, -1, "X.r.O", pDmA, pAmD),
        (b, None, True, -1, "X.r.O", pAmD, pDmA),
        (b, None, False, -1, "O.r.X", pAmD, pDmA),
        (b, None, False, -1, "O.r.X", pDmA, pAmD),
        (b, None, True, +1, "r.OX", pAmD, pDmA),
        (b, None, True, +1, "r.OX", pDmA, pAmD),
    ]


def _photon_terms(pairs, a, abar):
    terms = []
    for pair in pairs:
        i, j = pair
        sp_i, sm_i = sigma_plus(i), sigma_minus(i)
        sp_j, sm_j = sigma_plus(j), sigma_minus(j)
        terms += [
            (a, pair, False, +1, "XO.r", sp_i, sm_j),
            (abar, pair, False, +1, "XO.r", sm_i, sp_j),
            (abar, pair, True, -1, "X.r.O", sp_i, sm_j),
            (a, pair, True, -1, "X.r.O", sm_i, sp_j),
            (abar, pair, False, -1, "O.r.X", sm_j, sp_i),
            (a, pair, False, -1, "O.r.X", sp_j, sm_i),
            (a, pair, True, +1, "r.OX", sm_j, sp_i),
            (abar, pair, True, +1, "r.OX", sp_j, sm_i),
        ]
    return terms


def _terms_II():
    return _photon_terms(("DD", "DA", "AD", "AA"), "alpha", "alpha_bar")


def _terms_III():
    return _photon_terms(("DD", "AA"), "mix_alpha", "mix_alpha_bar")


def _slot_superop(slot, X, M):
    if slot == "XO.r":
        return spre(X @ M)
    if slot == "X.r.O":
        return sprepost(X, M)
    if slot == "O.r.X":
        return sprepost(M, X)
    if slot == "r.OX":
        return spost(M @ X)
    raise KeyError(slot)


def _tilde(O, tau, U):
    return U @ O @ U.conj().T


def _kernel_from_terms(terms, sys, baths, tau, prefactor):
    E, V = sys.eigensystem()
    U = (V * np.exp(-1j * E * tau)) @ V.conj().T
    K = np.zeros((9, 9), dtype=complex)
    for corr, pair, conj, sign, slot, X, O in terms:
        f = complex(baths.correlator(corr, pair, tau))
        if conj:
            f = np.conj(f)
        # the tilde operator sits in the slot named "O"
        K += sign * f * _slot_superop(slot, X, _tilde(O, tau, U))
    return prefactor * K


def kernel_term_I(sys, baths, tau):
    return _kernel_from_terms(_terms_I(), sys, baths, tau, sys.J_bare**2)


def kernel_term_II(sys, baths, tau):
    return _kernel_from_terms(_terms_II(), sys, baths, tau, sys.B_avg**2)


def kernel_term_III(sys, baths, tau):
    return _kernel_from_terms(_terms_III(), sys, baths, tau, 1.0)


def kernel(sys, baths, tau):
    return kernel_term_I(sys, baths, tau) + kernel_term_II(sys, baths, tau) + kernel_term_III(sys, baths, tau)


# --------------------------------------------------------------------------
# exact time integrals of the correlators


class _Integrals:
    """int_0^t f(tau) exp(i nu tau) d tau for every correlator, capped at tau_max.

    Each correlator is a phonon factor (1 for the pure photon terms) times an
    optional photon factor. The phonon factor is linear between tau nodes
    (Filon in tau); the photon factor is carried through its spectral form,
    so the tau step only has to resolve the phonon correlator. Inside an
    omega cell the spectrum is linear and the tau-cell moment E_m(x h) is
    taken linear as well; their product is integrated exactly against the
    carrier phase, which leaves an error of order (h d omega)^2 per cell.
    """

    def __init__(self, baths: BathModel, n_tau=None):
        self.b = baths
        self.n_tau = n_tau or baths.n_tau
        self.tau = graded_tau_grid(baths.tau_max, baths.tau_fine, self.n_tau)
        self.h = np.diff(self.tau)
        brk = np.flatnonzero(np.abs(np.diff(self.h)) > 1e-9 * self.h[1:]) + 1
        starts = np.concatenate([[0], brk])
        stops = np.concatenate([brk, [self.h.size]])
        self.blocks = [(i, j, float(np.mean(self.h[i:j]))) for i, j in zip(starts, stops)]
        phi = baths.phi(self.tau)
        self.series = {
            "beta_hop": beta_hop(baths.polaron, phi),
            "mix": beta_mixed(baths.polaron, phi),
            "unit": np.ones(self.tau.size),
        }
        self.cum = {}  # running segment sums keyed by request
        self.cache = {}
        ph = baths.photons
        if ph is not None:
            self.x0 = ph.table.omega - ph.frame

    @staticmethod
    def _series_name(corr):
        if corr == "beta_hop":
            return "beta_hop"
        return "mix" if corr.startswith("mix") else "unit"

    def _x_weights(self, req):
        corr, pair, nu = req
        if corr == "beta_hop":
            return np.array([-nu]), np.ones(1)
        ph = self.b.photons
        if corr in ("alpha", "mix_alpha"):
            return self.x0 - nu, ph.emission[pair]
        return -self.x0 - nu, ph.absorption[pair]

    def prepare(self, requests):
        """Segment sums for a batch of requests, sharing one phase table."""
        reqs = [r for r in dict.fromkeys(requests) if r not in self.cum]
        t0 = self.tau[:-1]
        hop = [r for r in reqs if r[0] == "beta_hop"]
        b = self.series["beta_hop"]
        db = np.diff(b)
        for r in hop:
            x, _ = self._x_weights(r)
            seg = np.empty(self.h.size, dtype=complex)
            for i, j, h in self.blocks:
                e0, e1 = _e0_e1(x * h)
                seg[i:j] = h * np.exp(-1j * x[0] * t0[i:j]) * (b[i:j] * e0[0] + db[i:j] * e1[0])
            self.cum[r] = np.concatenate([[0], np.cumsum(seg)])
        photon = [r for r in reqs if r[0] != "beta_hop"]
        if not photon:
            return
        plus = [r for r in photon if r[0] in ("alpha", "mix_alpha")]
        minus = [r for r in photon if r[0] in ("alpha_bar", "mix_alpha_bar")]
        F = {r: np.empty((self.h.size, 2), dtype=complex) for r in photon}
        step = max(1, 1_000_000 // self.x0.size)
        for i, j, h in self.blocks:
            # x = +-x0 - nu, so exp(-i x tau) = exp(-+i x0 tau) exp(i nu tau);
            # the minus branch is the complex conjugate of a plus-type integral
            Wp = [self._block_weights(r, h) for r in plus]
            Wm = [tuple(a.conj() for a in self._block_weights(r, h)) for r in minus]
            Ap = (np.concatenate([a for a, _ in Wp], axis=1), np.concatenate([c for _, c in Wp], axis=1)) if Wp else None
            Am = (np.concatenate([a for a, _ in Wm], axis=1), np.concatenate([c for _, c in Wm], axis=1)) if Wm else None
            for s0 in range(i, j, step):
                m = slice(s0, min(s0 + step, j))
                P0, P1, P2 = self._cell_matrices(t0[m])
                if Ap is not None:
                    A, Cc = Ap
                    out = P0 @ A[:-1] + P1 @ A[1:] - P2 @ Cc
                    for k, r in enumerate(plus):
                        F[r][m] = out[:, 2 * k:2 * k + 2]
                if Am is not None:
                    A, Cc = Am
                    out = (P0 @ A[:-1] + P1 @ A[1:] - P2 @ Cc).conj()
                    for k, r in enumerate(minus):
                        F[r][m] = out[:, 2 * k:2 * k + 2]
        for r in photon:
            b = self.series[self._series_name(r[0])]
            rot = np.exp(1j * r[2] * t0)
            seg = self.h * rot * (b[:-1] * F[r][:, 0] + np.diff(b) * F[r][:, 1])
            self.cum[r] = np.concatenate([[0], np.cumsum(seg)])

    def _cell_matrices(self, tau):
        """Exact cell integrals of exp(-i x0 tau) against 1 - u, u and u (1 - u).

        For a(w) linear and e(w) linear in each cell (u the cell coordinate),
        int a e exp(-i x0 tau) dw = P0 @ (ae)[:-1] + P1 @ (ae)[1:] - P2 @ (da de).
        """
        if not hasattr(self, "_cells"):
            dw = np.diff(self.b.photons.table.omega)
            # the grid is piecewise uniform: few distinct widths
            key = np.round(dw / dw.max(), 10)
            _, first, inv = np.unique(key, return_index=True, return_inverse=True)
            self._cells = (dw, dw[first], inv)
        dw, widths, inv = self._cells
        e0, e1, e2 = _e_moments(np.outer(tau, widths), 2)
        x = self.x0[:-1]
        steps = np.diff(tau)
        if tau.size > 2 and np.all(np.abs(steps - steps[0]) <= 1e-9 * steps[0]):
            # uniform rows: phase recurrence, exact restart every chunk
            ph = np.empty((tau.size, x.size), dtype=complex)
            ph[0] = np.exp(-1j * tau[0] * x)
            ph[1:] = np.exp(-1j * steps[0] * x)
            ph = np.cumprod(ph, axis=0)
        else:
            ph = np.exp(-1j * np.outer(tau, x))
        ph *= dw
        return ph * (e0 - e1)[:, inv], ph * e1[:, inv], ph * (e1 - e2)[:, inv]

    def _block_weights(self, req, h):
        """Nodal amplitudes w E_m(x h) and the cell products dw dE_m, m = 0, 1."""
        x, w = self._x_weights(req)
        e0, e1 = _e0_e1(x * h)
        E = np.stack([e0, e1], axis=1)
        return w[:, None] * E, np.diff(w)[:, None] * np.diff(E, axis=0)

    def _filon(self, req, t):
        if req not in self.cum:
            self.prepare([req])
        b = self.series[self._series_name(req[0])]
        out = self.cum[req][np.zeros(t.size, dtype=int)].copy()
        nseg = self.h.size
        m = np.clip(np.searchsorted(self.tau, t, side="right") - 1, 0, nseg)
        rem = np.where(m < nseg, t - self.tau[m], 0.0)
        hm = self.h[np.minimum(m, nseg - 1)]
        # stage times that land on a node within round-off
        up = rem > hm * (1 - 1e-9)
        m = np.where(up, m + 1, m)
        rem = np.where(up | (rem < hm * 1e-9), 0.0, rem)
        out = self.cum[req][m].astype(complex)
        part = np.flatnonzero(rem > 0)
        if part.size == 0:
            return out
        x, w = self._x_weights(req)
        for c in range(0, part.size, 64):
            k = part[c:c + 64]
            mk, rk = m[k], rem[k]
            slope = (b[mk + 1] - b[mk]) / self.h[mk]
            e0, e1 = _e0_e1(np.outer(rk, x))
            e = b[mk, None] * e0 + (slope * rk)[:, None] * e1  # rows: one per time
            amp = w * e
            if req[0] == "beta_hop":
                val = np.exp(-1j * x[0] * self.tau[mk]) * amp[:, 0]
            else:
                minus = req[0] in ("alpha_bar", "mix_alpha_bar")
                cross = np.diff(w) * np.diff(e, axis=1)
                if minus:
                    amp, cross = amp.conj(), cross.conj()
                P0, P1, P2 = self._cell_matrices(self.tau[mk])
                val = np.sum(P0 * amp[:, :-1] + P1 * amp[:, 1:] - P2 * cross, axis=1)
                if minus:
                    val = val.conj()
                val = val * np.exp(1j * req[2] * self.tau[mk])
            out[k] += rk * val
        return out

    def get(self, corr, pair, nu, t):
        t = np.asarray(t, dtype=float)
        key = (corr, pair, float(nu), t.tobytes())
        if key in self.cache:
            return self.cache[key]
        tu, inv = np.unique(np.minimum(t, self.b.tau_max), return_inverse=True)
        if corr != "beta_hop" and self.b.photons is None:
            val = np.zeros(t.shape, dtype=complex)
        elif corr.startswith("mix") and not np.any(self.series["mix"]):
            val = np.zeros(t.shape, dtype=complex)
        else:
            req = (corr, None if corr == "beta_hop" else pair, float(nu))
            val = self._filon(req, tu)[inv.reshape(t.shape)]
        self.cache[key] = val
        return val


@dataclass
class KernelSuperoperator:
    t: np.ndarray
    L: np.ndarray  # (len(t), 9, 9) cumulative integral of the kernel
    tau_max: float
    hamiltonian: np.ndarray

    def at(self, t):
        t = min(t, self.tau_max)
        idx = int(np.searchsorted(self.t, t))
        for k in (idx - 1, idx):
            if 0 <= k < self.t.size and abs(self.t[k] - t) <= 1e-9 * max(abs(t), 1e-18):
                return self.L[k]
        raise KeyError(f"generator not tabulated at t={t}")

    def norm(self):
        return float(np.max(np.linalg.norm(self.L, 2, axis=(1, 2))))

    def trace_residual(self):
        """max_t |Tr-functional of L(t)| relative to max ||L||."""
        n = self.norm()
        if n == 0:
            return 0.0
        return float(np.max(np.abs(np.einsum("j,tjk->tk", TRACE_ROW, self.L))) / n)


def _expanded_terms(sys: PolaronSystem, baths: BathModel):
    """(corr, pair, conj, weight, superop-builder args, nu_eff) for every non-vanishing piece."""
    out = []
    groups = [(_terms_I(), sys.J_bare**2), (_terms_II(), sys.B_avg**2), (_terms_III(), 1.0)]
    no_phonons = baths.phonon.gamma == 0
    for terms, pref in groups:
        if pref == 0:
            continue
        for corr, pair, conj, sign, slot, X, O in terms:
            if baths.photons is None and corr != "beta_hop":
                continue
            if no_phonons and (corr == "beta_hop" or corr.startswith("mix")):
                continue
            for nu, M in bohr_components(sys, O):
                # conj: f^* exp(i nu tau) = (f exp(-i nu tau))^*
                nu_eff = -nu if conj else nu
                out.append((corr, pair, conj, sign * pref, _slot_superop(slot, X, M), float(nu_eff)))
    return out


def integrals_for(baths: BathModel, n_tau=None) -> _Integrals:
    """Shared integral cache for one bath model and tau step."""
    key = n_tau or baths.n_tau
    store = baths._phi_cache.setdefault("integrals", {})
    if key not in store:
        store[key] = _Integrals(baths, key)
    return store[key]


def assemble_generator(sys: PolaronSystem, baths: BathModel, t_grid, n_tau=None) -> KernelSuperoperator:
    """L(t) = int_0^t [K_I + K_II + K_III](tau) d tau on ``t_grid`` (K truncated at tau_max)."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.min(t_grid) < 0:
        raise ValueError("times must be non-negative")
    t_grid = np.unique(np.minimum(t_grid, baths.tau_max))  # L(t) is constant past tau_max
    ints = integrals_for(baths, n_tau)
    pieces = _expanded_terms(sys, baths)
    ints.prepare([(c, None if c == "beta_hop" else p, nu) for c, p, _, _, _, nu in pieces])
    L = np.zeros((t_grid.size, 9, 9), dtype=complex)
    for corr, pair, conj, weight, S, nu in pieces:
        val = ints.get(corr, pair, nu, t_grid)
        if conj:
            val = np.conj(val)
        L += weight * val[:, None, None] * S[None]
    return KernelSuperoperator(t_grid, L, baths.tau_max, sys.hamiltonian())


# --------------------------------------------------------------------------
# propagation


@dataclass
class Trajectory:
    t: np.ndarray
    rho: np.ndarray  # (N, 3, 3) polaron frame, rotating frame
    min_eig: np.ndarray
    herm_err: np.ndarray | None = None  # anti-Hermitian part removed after each step
    failed: str | None = None

    @property
    def P_0(self):
        return self.rho[:, 0, 0].real

    @property
    def P_D(self):
        return self.rho[:, 1, 1].real

    @property
    def P_A(self):
        return self.rho[:, 2, 2].real

    @property
    def rho_DA(self):
        return self.rho[:, 1, 2]


def donor_state():
    rho = np.zeros((3, 3), dtype=complex)
    rho[1, 1] = 1.0
    return rho


def acceptor_state():
    rho = np.zeros((3, 3), dtype=complex)
    rho[2, 2] = 1.0
    return rho


def choose_dt(sys: PolaronSystem, L_norm: float, dt_max=None):
    """Largest step allowed by the system frequencies and the generator norm."""
    H = sys.hamiltonian()
    scale = max(abs(H[1, 1]), abs(H[2, 2]), abs(sys.J_prime))
    limits = [] if dt_max is None else [dt_max]
    if scale > 0:
        limits.append(0.005 * 2 * np.pi / scale)
    if L_norm > 0:
        limits.append(0.01 / L_norm)
    if not limits:
        raise ConfigurationError("no time scale available; give dt explicitly")
    return min(limits)


def rk4_times(t_max, dt, t_fine=0.0, dt_fine=None, nodes=None):
    """Step nodes and RK4 stage times; steps of ``dt_fine`` cover [0, t_fine].

    L(t) climbs from zero to its plateau over the bath memory time, far faster
    than the system dynamics, so the first stretch needs its own small step.
    With ``nodes`` (the tau grid) every step below ``nodes[-1]`` spans an even
    number of tau cells of one uniform block where possible, so that step ends
    and midpoints fall on nodes and L(t) needs no partial-cell integrals.
    """
    if not (t_max > 0 and dt > 0):
        raise ValueError("t_max and dt must be positive")
    if dt_fine is None or dt_fine >= dt:
        t_fine = 0.0
    steps = [0.0]
    if nodes is not None:
        steps = _aligned_steps(np.asarray(nodes, dtype=float), min(t_max, nodes[-1]), dt, t_fine, dt_fine)
    else:
        if t_fine > 0:
            k = int(np.ceil(min(t_fine, t_max) / dt_fine - 1e-9))
            steps = list(np.arange(k + 1) * dt_fine)
    start = steps[-1]
    n = int(np.ceil((t_max - start) / dt - 1e-9)) if t_max > start * (1 + 1e-12) else 0
    tail = start + np.arange(1, n + 1) * ((t_max - start) / max(n, 1))  # land exactly on t_max
    t = np.concatenate([np.asarray(steps, dtype=float), tail])
    t[-1] = t_max
    stages = np.concatenate([t, 0.5 * (t[:-1] + t[1:])])
    return t, stages


def _aligned_steps(nodes, t_end, dt, t_fine, dt_fine):
    h = np.diff(nodes)
    # end index of the uniform block each cell belongs to
    brk = np.flatnonzero(np.abs(np.diff(h)) > 1e-9 * h[1:]) + 1
    block_end = np.empty(h.size, dtype=int)
    for i, j in zip(np.concatenate([[0], brk]), np.concatenate([brk, [h.size]])):
        block_end[i:j] = j
    last = int(np.searchsorted(nodes, t_end * (1 - 1e-12), side="right")) - 1
    out = [0.0]
    i = 0
    while i < last:
        target = dt_fine if nodes[i] < t_fine * (1 - 1e-9) else dt
        if 2 * h[i] > target * (1 + 1e-9):
            # cells wider than the step: split the cell uniformly
            m = int(np.ceil(h[i] / target - 1e-9))
            out.extend(nodes[i] + h[i] * np.arange(1, m + 1) / m)
            i += 1
            continue
        stride = 2 * int(target / (2 * h[i]) + 1e-9)
        j = min(i + stride, block_end[i], last)
        if (j - i) % 2 and j - i > 1:
            j -= 1
        out.append(nodes[j])
        i = j
    if t_end > nodes[last] * (1 + 1e-12):
        # t_max inside the tau range and off the grid
        span = t_end - nodes[last]
        m = int(np.ceil(span / dt - 1e-9))
        out.extend(nodes[last] + span * np.arange(1, m + 1) / m)
    return out


def propagate(sys: PolaronSystem, gen: KernelSuperoperator, rho0, t_grid, check=True) -> Trajectory:
    """RK4 on d vec(rho)/dt = (-i [H, .] - L(t)) vec(rho) over the steps of ``t_grid``.

    The generator must be tabulated at the step ends and midpoints.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    H = gen.hamiltonian
    LH = -1j * (spre(H) - spost(H))
    rho0 = np.asarray(rho0, dtype=complex)
    if abs(np.trace(rho0) - 1) > 1e-8 or np.max(np.abs(rho0 - rho0.conj().T)) > 1e-10:
        raise ValueError("initial state must be Hermitian with unit trace")
    v = vec(rho0)
    out = np.empty((t_grid.size, 3, 3), dtype=complex)
    mins = np.empty(t_grid.size)
    herm = np.zeros(t_grid.size)
    out[0] = rho0
    mins[0] = np.linalg.eigvalsh(rho0)[0]

    def G(t):
        return LH - gen.at(t)

    for n in range(t_grid.size - 1):
        t0, t1 = t_grid[n], t_grid[n + 1]
        dt = t1 - t0
        Ga, Gm, Gb = G(t0), G(0.5 * (t0 + t1)), G(t1)
        k1 = Ga @ v
        k2 = Gm @ (v + dt / 2 * k1)
        k3 = Gm @ (v + dt / 2 * k2)
        k4 = Gb @ (v + dt * k3)
        v = v + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = unvec(v)
        herm[n + 1] = np.max(np.abs(rho - rho.conj().T))
        rho = 0.5 * (rho + rho.conj().T)  # drop the round-off anti-Hermitian part
        v = vec(rho)
        out[n + 1] = rho
        mins[n + 1] = np.linalg.eigvalsh(rho)[0]
        if check:
            drift = abs(np.trace(rho) - 1)
            msg = None
            if drift > 1e-6:
                msg = f"trace drift {drift:.3g} at t={t1:.4g} s; reduce dt"
            elif mins[n + 1] < -1e-3:
                msg = f"positivity violated (min eigenvalue {mins[n + 1]:.3g}) at t={t1:.4g} s"
            if msg:
                traj = Trajectory(t_grid[: n + 2], out[: n + 2], mins[: n + 2], herm[: n + 2], msg)
                raise IntegrationError(msg, traj)
    return Trajectory(t_grid, out, mins, herm)


def lab_frame_observables(traj: Trajectory, polaron: PolaronQuantities):
    """Populations are frame invariant; the D-A coherence picks up <B>^2."""
    return {
        "t": traj.t,
        "P_D": traj.P_D,
        "P_A": traj.P_A,
        "P_0": traj.P_0,
        "rho_DA": polaron.B_avg**2 * traj.rho_DA,
    }


@dataclass
class SimulationResult:
    trajectory: Trajectory
    generator: KernelSuperoperator
    dt: float
    dt_fine: float
    diagnostics: dict


def simulate(sys: PolaronSystem, baths: BathModel, t_max, rho0=None, dt=None, dt_fine=None,
             n_tau=None, check=True) -> SimulationResult:
    """Choose steps, assemble L(t) on the RK4 stage times, propagate.

    The first ``baths.tau_fine`` is stepped at ``dt_fine`` (default: two tau
    nodes) so that the rise of L(t) is resolved.
    """
    n_tau = n_tau or baths.n_tau
    decay = baths.check_decay()
    probe = assemble_generator(sys, baths, np.linspace(0.0, baths.tau_max, 65), n_tau)
    step = choose_dt(sys, probe.norm(), dt)
    if dt_fine is None:
        dt_fine = 2 * baths.tau_fine / n_tau
    dt_fine = min(dt_fine, step)
    nodes = integrals_for(baths, n_tau).tau
    t, stages = rk4_times(t_max, step, baths.tau_fine, dt_fine, nodes)
    gen = assemble_generator(sys, baths, stages, n_tau)
    traj = propagate(sys, gen, donor_state() if rho0 is None else rho0, t, check=check)
    diag = {
        "correlator_decay": decay,
        "generator_norm": gen.norm(),
        "trace_residual": gen.trace_residual(),
        "steps": int(t.size - 1),
    }
    return SimulationResult(traj, gen, float(step), float(dt_fine), diag)


def invariant_report(traj: Trajectory) -> dict:
    """Worst-case values of the state invariants along a trajectory."""
    rho = traj.rho
    tr = np.trace(rho, axis1=1, axis2=2)
    herm = np.max(np.abs(rho - np.conj(np.transpose(rho, (0, 2, 1)))), axis=(1, 2))
    if traj.herm_err is not None:
        herm = np.maximum(herm, traj.herm_err)
    block = np.max(np.abs(rho[:, 0, 1:]), axis=1)
    dP0 = np.diff(traj.P_0)
    return {
        "trace_error": float(np.max(np.abs(tr - 1))),
        "hermiticity_error": float(np.max(herm)),
        "ground_coherence": float(np.max(block)),
        "min_eigenvalue": float(np.min(traj.min_eig)),
        "max_P0_decrease": float(max(0.0, -np.min(dP0))) if dP0.size else 0.0,
    }


# --------------------------------------------------------------------------
# scalar summaries of a trajectory


def transfer_half_time(t, diff, level=0.5):
    """First time the population difference P_D - P_A falls to ``level`` (inf if never)."""
    t = np.asarray(t)
    diff = np.asarray(diff)
    below = np.flatnonzero(diff <= level)
    if below.size == 0:
        return float("inf")
    k = below[0]
    if k == 0:
        return float(t[0])
    # linear interpolation inside the crossing step
    f = (diff[k - 1] - level) / (diff[k - 1] - diff[k])
    return float(t[k - 1] + f * (t[k] - t[k - 1]))


def coherence_decay_time(t, coherence):
    """Time after which |coherence| stays below max|coherence|/e (inf if it never settles)."""
    mag = np.abs(np.asarray(coherence))
    t = np.asarray(t)
    thresh = mag.max() / np.e
    above = np.flatnonzero(mag >= thresh)
    if above.size == 0 or mag.max() == 0:
        return 0.0
    k = above[-1]
    if k == t.size - 1:
        return float("inf")
    f = (mag[k] - thresh) / (mag[k] - mag[k + 1])
    return float(t[k] + f * (t[k + 1] - t[k]))


def derivative_sign_changes(t, y, t_end, min_swing=1e-3):
    """Sign changes of dy/dt on [0, t_end] counted with hysteresis.

    A reversal counts once y has moved back by ``min_swing`` from the running
    extremum, so sub-threshold jitter is not read as oscillation.
    """
    t = np.asarray(t)
    y = np.asarray(y)[t <= t_end]
    if y.size < 2:
        return 0
    changes = 0
    direction = 0
    lo = hi = y[0]
    for v in y[1:]:
        hi = max(hi, v)
        lo = min(lo, v)
        if direction >= 0 and hi - v >= min_swing:
            changes += direction > 0
            direction, lo = -1, v
        elif direction <= 0 and v - lo >= min_swing:
            changes += direction < 0
            direction, hi = 1, v
    return int(changes)
