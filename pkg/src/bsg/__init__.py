"""Josephson-junction-array boundary sine-Gordon toolkit.

Submodules: ``circuit`` (linear network and scattering), ``scha`` (self-consistent
harmonic approximation), ``selfenergy`` (perturbative self-consistent weak-link
self-energy), ``spectroscopy`` (trace synthesis and resonance fitting),
``losses`` (competing dissipation channels) and ``cli``.
"""
__version__ = "0.1.0"

__all__ = ["circuit", "scha", "selfenergy", "spectroscopy", "losses", "config", "__version__"]
