"""Excitation energy transfer of a donor-acceptor dimer near a metallic thin film.

Layered-media Green's functions, evanescent-field spectral densities and a
second-order polaron master equation for the three-level dimer.
"""

__version__ = "0.1.0"
