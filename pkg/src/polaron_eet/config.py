"""Flat ``key = value`` scenario configuration and the figure presets.

Units are SI except where the key says otherwise: lengths of the geometry and
the sites are in nm, dipole moments in Debye.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baths import PhononBathSpec, PhotonBathSpec
from .greens import QuadratureSpec
from .medium import C, DEBYE, Dielectric, DipoleSite, DrudeMetal, FilmGeometry


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "metal.model": "drude",  # drude | constant
    "metal.omega_p": 4.6e15,  # rad/s
    "metal.nu": 3.4e13,  # rad/s
    "metal.eps": 1.0,  # permittivity of a 'constant' film
    "geometry.a": 10.0,  # nm
    "geometry.eps1": 1.0,
    "sites.d": 2.0,  # nm, along x
    "sites.z": 10.0,  # nm
    "sites.mu_D": 1.0,  # Debye
    "sites.mu_A": 1.0,
    "sites.orientation": "z",
    "sites.lambda0": 630.0,  # nm
    "baths.gamma": 0.1,
    "baths.omega_c": 2e13,  # rad/s
    "baths.T": 300.0,  # K
    "run.t_max": 3e-10,  # s
    "run.dt": 0.0,  # s, 0 = automatic
    "run.tau_max": 8e-12,  # s
    "run.n_tau": 1000,  # tau steps per octave
    "run.tau_fine": 2e-13,  # s
    "run.convergence": "dt",  # none | dt | full
    "grid.omega_min": 5e14,  # rad/s, photon table
    "grid.omega_max": 1.2e16,
    "grid.n": 4096,
    "grid.refine": 4,
    "grid.refine_halfwidth_nu": 10.0,
    "grid.taper": 0.02,
    "quad.rel_tol": 1e-8,
    "spectrum.omega_min": 1.0e15,  # rad/s, ldos/csd output grid
    "spectrum.omega_max": 4.0e15,
    "spectrum.n": 601,
    "spectrum.z": (5.0, 20.0),  # nm
    "spectrum.x": 4.0,  # nm, csd separation
    "spectrum.convergence": True,
    "sweep.axis": "z",
    "sweep.values": (2.0, 10.0),
}

SWEEP_AXES = {"z": "sites.z", "a": "geometry.a", "d": "sites.d", "gamma": "baths.gamma"}

PRESETS = {
    "fig1": ("ldos", {"geometry.a": 10.0, "spectrum.z": (5.0, 20.0)}),
    "fig2": ("csd", {"geometry.a": 10.0, "spectrum.z": (5.0, 20.0), "spectrum.x": 4.0}),
    "fig1dyn": ("dynamics", {"baths.gamma": 0.1, "sites.d": 2.0, "sites.z": 10.0, "geometry.a": 10.0,
                             "run.convergence": "full"}),
    "fig2dyn": ("dynamics", {"baths.gamma": 0.1, "sites.d": 2.0, "sites.z": 2.0, "geometry.a": 10.0}),
    "fig3dyn": ("sweep", {"baths.gamma": 1.0, "sites.d": 2.0, "geometry.a": 10.0,
                          "sweep.axis": "z", "sweep.values": (2.0, 10.0)}),
    "fig4dyn": ("sweep", {"baths.gamma": 0.1, "sites.d": 10.0, "sites.z": 10.0, "run.t_max": 1.5e-9,
                          "sweep.axis": "a", "sweep.values": (5.0, 50.0)}),
    "fig5dyn": ("sweep", {"baths.gamma": 0.1, "sites.d": 2.0, "geometry.a": 10.0,
                          "sweep.axis": "z", "sweep.values": (2.0, 10.0)}),
}


def _coerce(key, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            val = float(raw)
            if val != int(val):
                raise ValueError(raw)
            return int(val)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if isinstance(raw, (tuple, list)):
                return tuple(float(v) for v in raw)
            return tuple(float(v) for v in str(raw).split(",") if v.strip())
        return str(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None


def parse_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def resolve(*layers):
    """Merge layers of raw settings onto the defaults with type checking."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, raw in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            cfg[key] = _coerce(key, raw, DEFAULTS[key])
    validate(cfg)
    return cfg


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def validate(cfg):
    positive = [
        "metal.omega_p", "metal.nu", "geometry.a", "sites.d", "sites.z", "sites.lambda0",
        "baths.omega_c", "baths.T", "run.t_max", "run.tau_max", "run.tau_fine", "grid.omega_min",
        "grid.omega_max", "quad.rel_tol", "spectrum.omega_min", "spectrum.omega_max", "spectrum.x",
    ]
    for k in positive:
        if not cfg[k] > 0:
            raise ConfigError(f"{k} must be positive, got {cfg[k]}")
    for k in ("baths.gamma", "sites.mu_D", "sites.mu_A", "run.dt", "grid.taper"):
        if cfg[k] < 0:
            raise ConfigError(f"{k} must be non-negative")
    if cfg["geometry.eps1"] < 1:
        raise ConfigError("geometry.eps1 must be >= 1")
    if cfg["metal.model"] not in ("drude", "constant"):
        raise ConfigError("metal.model must be 'drude' or 'constant'")
    if cfg["sites.orientation"] not in ("z", "x"):
        raise ConfigError("sites.orientation must be 'z' or 'x'")
    if cfg["run.convergence"] not in ("none", "dt", "full"):
        raise ConfigError("run.convergence must be none, dt or full")
    if cfg["sweep.axis"] not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {sorted(SWEEP_AXES)}")
    vals = cfg["sweep.values"]
    if any(v < 0 for v in vals) or list(vals) != sorted(vals):
        raise ConfigError("sweep.values must be non-negative and sorted")
    if cfg["sweep.axis"] != "gamma" and any(v <= 0 for v in vals):
        raise ConfigError("sweep.values must be positive for length axes")
    if any(z <= 0 for z in cfg["spectrum.z"]):
        raise ConfigError("spectrum.z values must be positive")
    if cfg["spectrum.n"] < 2 or cfg["grid.n"] < 16 or cfg["run.n_tau"] < 1:
        raise ConfigError("grid sizes too small")
    if cfg["spectrum.omega_max"] <= cfg["spectrum.omega_min"] or cfg["grid.omega_max"] <= cfg["grid.omega_min"]:
        raise ConfigError("frequency ranges must be increasing")


def to_text(cfg):
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# physics objects


NM = 1e-9


@dataclass(frozen=True)
class Scenario:
    metal: object
    geometry: FilmGeometry
    donor: DipoleSite
    acceptor: DipoleSite
    phonons: PhononBathSpec
    photons: PhotonBathSpec
    quad: QuadratureSpec
    omega0: float


def metal_of(cfg):
    if cfg["metal.model"] == "constant":
        return Dielectric(cfg["metal.eps"])
    return DrudeMetal(cfg["metal.omega_p"], cfg["metal.nu"])


def scenario(cfg) -> Scenario:
    omega0 = 2 * np.pi * C / (cfg["sites.lambda0"] * NM)
    n = (0.0, 0.0, 1.0) if cfg["sites.orientation"] == "z" else (1.0, 0.0, 0.0)
    z = cfg["sites.z"] * NM
    half = 0.5 * cfg["sites.d"] * NM
    D = DipoleSite((-half, 0.0, z), n, cfg["sites.mu_D"] * DEBYE, omega0)
    A = DipoleSite((half, 0.0, z), n, cfg["sites.mu_A"] * DEBYE, omega0)
    return Scenario(
        metal=metal_of(cfg),
        geometry=FilmGeometry(cfg["geometry.a"] * NM, cfg["geometry.eps1"]),
        donor=D,
        acceptor=A,
        phonons=PhononBathSpec(cfg["baths.gamma"], cfg["baths.omega_c"], cfg["baths.T"]),
        photons=PhotonBathSpec(
            T=cfg["baths.T"], omega_min=cfg["grid.omega_min"], omega_max=cfg["grid.omega_max"],
            n=cfg["grid.n"], refine=cfg["grid.refine"], refine_halfwidth_nu=cfg["grid.refine_halfwidth_nu"],
            taper=cfg["grid.taper"],
        ),
        quad=QuadratureSpec(rel_tol=cfg["quad.rel_tol"]),
        omega0=omega0,
    )
