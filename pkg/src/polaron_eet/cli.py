"""Command line driver: spectra, dynamics, sweeps and figure presets.

Exit codes: 0 clean, 1 bad input, 2 partial output (flagged rows), 3 invariant breach.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cf
from .baths import PhotonCorrelators, photon_spectral_table, polaron_quantities
from .dynamics import (
    BathModel,
    ConfigurationError,
    IntegrationError,
    build_polaron_system,
    coherence_decay_time,
    invariant_report,
    lab_frame_observables,
    simulate,
    transfer_half_time,
)
from .greens import QuadratureError, csd_prefactor, dipole_coupling_J, free_space_green, ldos_z_array, \
    scattering_green_array

EXIT_OK, EXIT_INPUT, EXIT_PARTIAL, EXIT_BREACH = 0, 1, 2, 3

INVARIANT_LIMITS = {
    "trace_error": 1e-8,
    "hermiticity_error": 1e-10,
    "ground_coherence": 1e-12,
    "max_P0_decrease": 1e-6,
}


# --------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, comments, columns, rows):
    with open(path, "w", newline="\n") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


@dataclass
class Output:
    """Tables produced by one run, written by a single collector."""

    name: str
    tables: dict = field(default_factory=dict)  # file name -> (comments, columns, rows)
    metrics: dict = field(default_factory=dict)
    status: int = EXIT_OK
    messages: list = field(default_factory=list)


def write_output(out: Output, directory, cfg, command, wall):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for fname, (comments, columns, rows) in sorted(out.tables.items()):
        write_csv(directory / fname, comments, columns, rows)
        files.append(fname)
    manifest = {
        "command": command,
        "version": __version__,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())},
        "files": files,
        "metrics": out.metrics,
        "status": {EXIT_OK: "ok", EXIT_PARTIAL: "partial", EXIT_BREACH: "invariant-breach"}[out.status],
        "messages": out.messages,
        "wall_time_s": wall,
    }
    with open(directory / f"{out.name}_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return manifest


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


# --------------------------------------------------------------------------
# spectra


def spectrum_grid(cfg, factor=1):
    n = (cfg["spectrum.n"] - 1) * factor + 1
    return np.linspace(cfg["spectrum.omega_min"], cfg["spectrum.omega_max"], n)


def _chunked(fn, omega, chunk=64):
    """Evaluate ``fn`` on chunks; a failing chunk falls back to single points, failures flagged."""
    vals, flags = [], []
    for s in range(0, omega.size, chunk):
        w = omega[s:s + chunk]
        try:
            vals.append(np.asarray(fn(w)))
            flags.append(np.zeros(w.size, dtype=int))
        except QuadratureError:
            for wi in w:
                try:
                    vals.append(np.asarray(fn(np.array([wi]))))
                    flags.append(np.zeros(1, dtype=int))
                except QuadratureError:
                    vals.append(np.full(1, np.nan))
                    flags.append(np.ones(1, dtype=int))
    return np.concatenate(vals), np.concatenate(flags)


def _ldos_curve(scn, z, omega):
    def ratio(w):
        return ldos_z_array(scn.geometry, scn.metal.permittivity(w), w, z, scn.quad)[1]

    r, flags = _chunked(ratio, omega)
    free = np.sqrt(scn.geometry.eps1) * omega / cf.C / (6 * np.pi)
    absolute = omega / (np.pi * cf.C**2) * free * r
    return r, absolute, flags


def _peak_shift(cfg, curve_fn):
    """Peak location change (in output-grid steps) when the frequency grid is doubled."""
    w1, w2 = spectrum_grid(cfg), spectrum_grid(cfg, 2)
    y1, y2 = curve_fn(w1), curve_fn(w2)
    p1 = w1[np.nanargmax(y1)]
    p2 = w2[np.nanargmax(y2)]
    return float(abs(p1 - p2) / (w1[1] - w1[0]))


def run_ldos(cfg) -> Output:
    scn = cf.scenario(cfg)
    omega = spectrum_grid(cfg)
    out = Output("ldos")
    shifts, peaks = {}, {}
    for zn in cfg["spectrum.z"]:
        z = zn * cf.NM
        ratio, absolute, flags = _ldos_curve(scn, z, omega)
        out.tables[f"ldos_z{zn:g}nm.csv"] = (
            [f"polaron_eet {__version__} ldos", f"z-projected electric LDOS at z = {zn:g} nm",
             "units: omega rad/s; ratio dimensionless (to free space); absolute s/m^3",
             "flag = 1 marks a failed quadrature"],
            ["omega", "ratio", "absolute", "flag"], list(zip(omega, ratio, absolute, flags)))
        if flags.any():
            out.status = EXIT_PARTIAL
            out.messages.append(f"z={zn:g} nm: {int(flags.sum())} flagged rows")
        if np.all(np.isfinite(ratio)):
            peaks[f"z{zn:g}nm"] = float(omega[np.argmax(ratio)])
        if cfg["spectrum.convergence"]:
            shifts[f"z{zn:g}nm"] = _peak_shift(cfg, lambda w: _ldos_curve(scn, z, w)[0])
    out.metrics["peak_omega"] = peaks
    out.metrics["peak_shift_grid_steps_on_doubling"] = shifts
    return out


def _csd_curve(scn, z, x, omega):
    r, rp = (-x / 2, 0.0, z), (x / 2, 0.0, z)

    def scat(w):
        return scattering_green_array("zz", scn.geometry, scn.metal.permittivity(w), w, r, rp, scn.quad)

    g_s, flags = _chunked(scat, omega)
    g_f = np.array([free_space_green("zz", scn.geometry.eps1, r, rp, w).value for w in omega])
    g = g_s + g_f
    pre = csd_prefactor(omega)
    csd, csd_free = pre * g.imag, pre * g_f.imag
    return g, csd, np.abs(csd) / np.abs(csd_free), flags


def run_csd(cfg) -> Output:
    scn = cf.scenario(cfg)
    omega = spectrum_grid(cfg)
    x = cfg["spectrum.x"] * cf.NM
    out = Output("csd")
    shifts, peaks = {}, {}
    for zn in cfg["spectrum.z"]:
        z = zn * cf.NM
        g, csd, ratio, flags = _csd_curve(scn, z, x, omega)
        out.tables[f"csd_z{zn:g}nm.csv"] = (
            [f"polaron_eet {__version__} csd", f"zz cross-spectral density at z = {zn:g} nm, x = {cfg['spectrum.x']:g} nm",
             "units: omega rad/s; re_G, im_G 1/m; csd J s/m^3 (hbar w^2 Im G / eps0 c^2); ratio dimensionless",
             "flag = 1 marks a failed quadrature"],
            ["omega", "re_G", "im_G", "csd", "ratio", "flag"],
            list(zip(omega, g.real, g.imag, csd, ratio, flags)))
        if flags.any():
            out.status = EXIT_PARTIAL
            out.messages.append(f"z={zn:g} nm: {int(flags.sum())} flagged rows")
        if np.all(np.isfinite(ratio)):
            peaks[f"z{zn:g}nm"] = float(omega[np.argmax(ratio)])
        if cfg["spectrum.convergence"]:
            shifts[f"z{zn:g}nm"] = _peak_shift(cfg, lambda w: _csd_curve(scn, z, x, w)[2])
    out.metrics["peak_omega"] = peaks
    out.metrics["peak_shift_grid_steps_on_doubling"] = shifts
    return out


# --------------------------------------------------------------------------
# dynamics

_TABLES = {}


def photon_table(scn):
    key = (scn.metal, scn.geometry, scn.donor, scn.acceptor, scn.photons, scn.quad)
    if key not in _TABLES:
        grid = scn.photons.grid(scn.metal, scn.geometry.eps1)
        _TABLES[key] = photon_spectral_table(scn.donor, scn.acceptor, scn.geometry, scn.metal, grid, scn.quad)
    return _TABLES[key]


def build_model(cfg):
    """(scenario, system, bath model, photon table or None, bare J) for a config."""
    scn = cf.scenario(cfg)
    pq = polaron_quantities(scn.phonons)
    J = dipole_coupling_J(scn.geometry, scn.metal, scn.donor, scn.acceptor, scn.omega0, scn.quad)
    system = build_polaron_system(scn.donor, scn.acceptor, J, pq)
    table = None
    photons = None
    if scn.donor.mu > 0 or scn.acceptor.mu > 0:
        table = photon_table(scn)
        photons = PhotonCorrelators(table, scn.photons.T, system.omega_ref, scn.photons.taper)
    baths = BathModel(scn.phonons, pq, photons, tau_max=cfg["run.tau_max"], n_tau=cfg["run.n_tau"],
                      tau_fine=cfg["run.tau_fine"])
    return scn, system, baths, table, J


def _trajectory_rows(traj, polaron):
    obs = lab_frame_observables(traj, polaron)
    return list(zip(obs["t"], obs["P_D"], obs["P_A"], obs["P_0"], obs["P_D"] - obs["P_A"],
                    obs["rho_DA"].real, obs["rho_DA"].imag))


DYN_COLUMNS = ["t", "P_D", "P_A", "P_0", "P_D_minus_P_A", "re_rho_DA", "im_rho_DA"]


def run_dynamics(cfg, name="dynamics") -> Output:
    out = Output(name)
    scn, system, baths, table, J = build_model(cfg)
    dt = cfg["run.dt"] or None
    header = [
        f"polaron_eet {__version__} dynamics",
        f"J_DA = {J:.17g} rad/s; J' = {system.J_prime:.17g} rad/s; <B> = {baths.polaron.B_avg:.17g}; "
        f"Delta = {baths.polaron.Delta:.17g} rad/s",
        "units: t s; populations and rho_DA (lab frame, D-A coherence) dimensionless",
    ]
    try:
        res = simulate(system, baths, cfg["run.t_max"], dt=dt)
    except ConfigurationError as exc:
        raise cf.ConfigError(str(exc)) from None
    except IntegrationError as exc:
        traj = exc.trajectory
        out.status = EXIT_BREACH
        out.messages.append(str(exc))
        out.tables[f"{name}.csv"] = (header + [f"FAILED: {exc}"], DYN_COLUMNS,
                                     _trajectory_rows(traj, baths.polaron))
        out.metrics["invariants"] = invariant_report(traj)
        return out
    traj = res.trajectory
    inv = invariant_report(traj)
    breaches = [k for k, lim in INVARIANT_LIMITS.items() if inv[k] > lim]
    if inv["min_eigenvalue"] < -1e-3:
        breaches.append("min_eigenvalue")
    if breaches:
        out.status = EXIT_BREACH
        out.messages.append("invariant breach: " + ", ".join(breaches))
    out.tables[f"{name}.csv"] = (header, DYN_COLUMNS, _trajectory_rows(traj, baths.polaron))
    if table is not None:
        out.tables[f"{name}_photon_table.csv"] = (
            ["photon spectral densities S_ij(omega) = mu_i mu_j w^2 n_i.Im G.n_j / (eps0 c^2 hbar)",
             "units: omega rad/s; S rad/s^2 per rad/s"],
            ["omega", "S_DD", "S_DA", "S_AA"],
            list(zip(table.omega, table.S["DD"], table.S["DA"], table.S["AA"])))
    obs = lab_frame_observables(traj, baths.polaron)
    diff = obs["P_D"] - obs["P_A"]
    conv = {"dt": res.dt, "dt_fine": res.dt_fine, "n_tau": baths.n_tau}
    mode = cfg["run.convergence"]
    final = float(traj.P_D[-1])
    if mode in ("dt", "full"):
        half = simulate(system, baths, cfg["run.t_max"], dt=res.dt / 2, dt_fine=res.dt_fine / 2, check=False)
        conv["dP_D_dt_halving"] = abs(float(half.trajectory.P_D[-1]) - final)
    if mode == "full":
        fine = simulate(system, baths, cfg["run.t_max"], dt=res.dt, dt_fine=res.dt_fine,
                        n_tau=2 * baths.n_tau, check=False)
        conv["dP_D_tau_halving"] = abs(float(fine.trajectory.P_D[-1]) - final)
        a, b = res.generator.L[-1], fine.generator.L[-1]
        conv["dL_tau_halving_rel"] = float(np.linalg.norm(a - b) / np.linalg.norm(a))
    out.metrics.update({
        "J_DA": J,
        "J_prime": system.J_prime,
        "B_avg": baths.polaron.B_avg,
        "Delta": baths.polaron.Delta,
        "invariants": inv,
        "convergence": conv,
        "diagnostics": res.diagnostics,
        "transfer_half_time": _finite(transfer_half_time(traj.t, diff)),
        "P0_final": float(traj.P_0[-1]),
        "coherence_decay_time": _finite(coherence_decay_time(traj.t, obs["rho_DA"])),
    })
    return out


def _sweep_point(args):
    cfg, key, value, name = args
    point = dict(cfg)
    point[key] = value
    cf.validate(point)
    t0 = time.perf_counter()
    try:
        return run_dynamics(point, name), point, time.perf_counter() - t0
    except Exception as exc:  # isolate per-value failures
        out = Output(name, status=EXIT_BREACH, messages=[f"{type(exc).__name__}: {exc}"])
        return out, point, time.perf_counter() - t0


def _time_or_inf(metrics, key):
    if key not in metrics:
        return float("nan")
    v = metrics[key]
    return float("inf") if v is None else v


def run_sweep(cfg, jobs=1):
    """One dynamics output per value plus a summary; returns (outputs, summary Output)."""
    axis = cfg["sweep.axis"]
    key = cf.SWEEP_AXES[axis]
    tasks = [(cfg, key, float(v), f"{axis}_{v:g}") for v in cfg["sweep.values"]]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
            results = list(ex.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    summary = Output("sweep")
    rows = []
    for (_, _, v, _), (out, _, _) in zip(tasks, results):
        m = out.metrics
        rows.append((v, _time_or_inf(m, "transfer_half_time"), m.get("P0_final", float("nan")),
                     _time_or_inf(m, "coherence_decay_time"), out.status))
        summary.status = max(summary.status, out.status)
    unit = {"z": "nm", "a": "nm", "d": "nm", "gamma": "dimensionless"}[axis]
    summary.tables["sweep_summary.csv"] = (
        [f"polaron_eet {__version__} sweep over {axis}",
         f"units: value {unit}; half_time s (first P_D - P_A <= 0.5); P0_final dimensionless; "
         "coherence_time s (|rho_DA| settles below max/e); status exit code of the point"],
        ["value", "half_time", "P0_final", "coherence_time", "status"], rows)
    summary.metrics["points"] = {name: out.metrics for (_, _, _, name), (out, _, _) in zip(tasks, results)}
    return results, summary


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def make_parser():
    p = _Parser(prog="polaron-eet", description="Energy transfer near a metal film with a polaron master equation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' configuration file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for sweeps")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("ldos", "csd", "dynamics", "sweep"):
        sub.add_parser(name, parents=[common])
    pre = sub.add_parser("preset", parents=[common])
    pre.add_argument("name", choices=sorted(cf.PRESETS))
    sub.add_parser("defaults", help="print the default configuration")
    return p


def execute(command, cfg, out_dir, jobs=1):
    """Run one command and write its files; returns the exit code."""
    t0 = time.perf_counter()
    if command in ("ldos", "csd", "dynamics"):
        fn = {"ldos": run_ldos, "csd": run_csd, "dynamics": run_dynamics}[command]
        out = fn(cfg)
        write_output(out, out_dir, cfg, command, time.perf_counter() - t0)
        return out.status
    results, summary = run_sweep(cfg, jobs)
    for out, point, wall in results:
        write_output(out, Path(out_dir) / out.name, point, "dynamics", wall)
    write_output(summary, out_dir, cfg, "sweep", time.perf_counter() - t0)
    return summary.status


def main(argv=None):
    args = make_parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(cf.to_text(cf.DEFAULTS))
        return EXIT_OK
    try:
        layers = []
        command = args.command
        if command == "preset":
            command, layer = cf.PRESETS[args.name]
            layers.append(layer)
        if args.config is not None:
            layers.append(cf.parse_text(args.config.read_text()))
        layers.append(cf.parse_overrides(args.override))
        cfg = cf.resolve(*layers)
        if args.jobs < 1:
            raise cf.ConfigError("--jobs must be >= 1")
        code = execute(command, cfg, args.out, args.jobs)
    except (cf.ConfigError, OSError, NotImplementedError) as exc:
        sys.stderr.write(f"polaron-eet: {exc}\n")
        return EXIT_INPUT
    return code


if __name__ == "__main__":
    sys.exit(main())
