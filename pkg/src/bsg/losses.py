"""Conventional loss channels: chain dielectric, boundary-junction loss and flux noise.

These are used to calibrate the flux-independent background damping and to
bound how much of the observed broadening ordinary mechanisms can explain.
All rates are returned in Hz (linewidth gamma = f / Q).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import constants as sc

from . import circuit, scha
from .circuit import DeviceParams

REFERENCE_OMEGA = 2 * np.pi * 1e9


@dataclass(frozen=True)
class DielectricModel:
    """tan(delta) = amplitude * omega**exponent in the array capacitances.

    ``screening_length`` is in sites and ``phase_velocity`` in sites*rad/s so
    that x = omega * screening_length / phase_velocity is dimensionless.
    """

    amplitude: float
    exponent: float
    screening_length: float
    phase_velocity: float

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if not (self.screening_length > 0 and self.phase_velocity > 0):
            raise ValueError("screening_length and phase_velocity must be > 0")

    @classmethod
    def for_array(cls, array: circuit.ArrayParams, tan_delta_ref, exponent=0.5,
                  reference_omega=REFERENCE_OMEGA):
        """Model with tan(delta) = ``tan_delta_ref`` at ``reference_omega``."""
        amp = tan_delta_ref / reference_omega ** exponent
        return cls(amp, exponent, array.screening_length,
                   1.0 / np.sqrt(array.inductance * array.ground_capacitance))

    def tan_delta(self, omega):
        return self.amplitude * np.asarray(omega, dtype=float) ** self.exponent

    def x(self, omega):
        return np.asarray(omega, dtype=float) * self.screening_length / self.phase_velocity


@dataclass(frozen=True)
class ComplexWavenumber:
    kappa_prime: np.ndarray
    kappa_double: np.ndarray

    @property
    def quality_factor(self):
        with np.errstate(divide="ignore", over="ignore"):
            return self.kappa_prime / (2 * self.kappa_double)


@dataclass(frozen=True)
class JunctionLossModel:
    """Resistive shunt of the boundary junction.

    ``variant`` is ``"dielectric"`` (uses ``tan_delta``) or ``"quasiparticle"``
    (uses ``x_qp`` and ``gap``).
    """

    variant: str
    lj_star: float
    cj: float
    tan_delta: float = 0.0
    x_qp: float = 0.0
    gap: float = 210e-6 * sc.e

    def __post_init__(self):
        if self.variant not in ("dielectric", "quasiparticle"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 <= self.x_qp < 1:
            raise ValueError("x_qp must lie in [0, 1)")
        if not self.gap > 0:
            raise ValueError("gap must be > 0")
        if self.tan_delta < 0:
            raise ValueError("tan_delta must be >= 0")


@dataclass(frozen=True)
class FluxNoiseModel:
    """1/f^beta flux noise S(w) = A^2 |2 pi / w|^beta over a finite band (Hz)."""

    amplitude: float
    exponent: float = 1.0
    f_lo: float = 1.0
    f_hi: float = 1e9

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.exponent > 1:
            raise ValueError("exponent must be <= 1")
        if not 0 < self.f_lo < self.f_hi:
            raise ValueError("need 0 < f_lo < f_hi")

    def rms_flux(self, absorb_log=True):
        """Root-mean-square flux (Wb).

        With ``absorb_log`` the order-unity band factor is dropped and the
        amplitude itself is returned; otherwise the band integral
        (1/pi) int S(w) dw is evaluated.
        """
        if absorb_log:
            return self.amplitude
        b = self.exponent
        lo, hi = 2 * np.pi * self.f_lo, 2 * np.pi * self.f_hi
        if b == 1:
            integral = 2 * np.pi * np.log(hi / lo)
        else:
            integral = (2 * np.pi) ** b * (hi ** (1 - b) - lo ** (1 - b)) / (1 - b)
        return float(np.sqrt(self.amplitude ** 2 * integral / np.pi))


# ---------------------------------------------------------------------------
# chain dielectric


def kappa(model: DielectricModel, omega) -> ComplexWavenumber:
    """First-order complex wavenumber (1/site) of the lossy array."""
    x = model.x(omega)
    td = model.tan_delta(omega)
    lc = model.screening_length
    kp = x / lc / np.sqrt(1 - x ** 2)
    kpp = 0.5 * td * (x / lc) * x ** 2 / (1 - x ** 2) ** 1.5
    return ComplexWavenumber(kp, kpp)


def kappa_exact(model: DielectricModel, omega) -> np.ndarray:
    """Complex wavenumber from the full square root (no expansion in tan delta)."""
    x = model.x(omega)
    td = model.tan_delta(omega)
    k2 = (x / model.screening_length) ** 2 / (1 - x ** 2 * (1 + 1j * td))
    return np.sqrt(k2)


def gamma_diel(model: DielectricModel, omega, check=True):
    """TEM-limit dielectric linewidth (Hz): (w / 2pi) x^2 tan(delta).

    Raises ``ValueError`` outside x < 0.5, tan(delta) < 0.1 when ``check``.
    """
    w = np.asarray(omega, dtype=float)
    x = model.x(w)
    td = model.tan_delta(w)
    if check and (np.any(x >= 0.5) or np.any(td >= 0.1)):
        raise ValueError("outside the weak-loss, long-wavelength regime")
    return w / (2 * np.pi) * x ** 2 * td


def gamma_diel_kappa(model: DielectricModel, omega):
    """Dielectric linewidth (Hz) via Q = kappa' / 2 kappa''."""
    w = np.asarray(omega, dtype=float)
    k = kappa(model, w)
    with np.errstate(divide="ignore"):
        return np.where(k.kappa_double == 0, 0.0, w / (2 * np.pi) / k.quality_factor)


def gamma_diel_closed(model: DielectricModel, omega):
    """Closed form of :func:`gamma_diel_kappa`: (w / 2pi) x^2 tan(delta) / (1 - x^2)."""
    w = np.asarray(omega, dtype=float)
    x = model.x(w)
    return w / (2 * np.pi) * x ** 2 * model.tan_delta(w) / (1 - x ** 2)


# ---------------------------------------------------------------------------
# boundary junction


def r_junction(model: JunctionLossModel, omega):
    """Shunt resistance (Ohm) of the boundary junction at ``omega``."""
    w = np.asarray(omega, dtype=float)
    if np.any(w <= 0):
        raise ValueError("omega must be > 0")
    if model.variant == "dielectric":
        with np.errstate(divide="ignore", over="ignore"):
            return 1.0 / (w * model.cj * model.tan_delta)
    with np.errstate(divide="ignore", over="ignore"):
        return np.pi * w * model.lj_star / model.x_qp * np.sqrt(2 * model.gap / (sc.hbar * w))


def junction_admittance(model: JunctionLossModel, omega):
    """Parallel R L* C_J admittance in the package sign convention."""
    w = np.asarray(omega, dtype=float)
    y = 1j / (w * model.lj_star) - 1j * w * model.cj
    return y + 1.0 / r_junction(model, w)


def gamma_boundary(device: DeviceParams, y_j_star, omega):
    """Mode linewidth (Hz) from the round-trip reflection at the weak link.

    gamma = (FSR / pi) ln |(1 + Zc~ Y) / (1 - Zc~ Y)| with
    Zc~ = Z_c / sqrt(1 - w^2 L C), assuming perfect reflection at the far end.
    """
    a = device.array
    w = np.asarray(omega, dtype=float)
    z_t = a.characteristic_impedance / np.sqrt(1 - w ** 2 * a.inductance * a.capacitance)
    zy = z_t * np.asarray(y_j_star)
    den = np.abs(1 - zy)
    if np.any(den < 1e-14):
        raise circuit.PoleError("weak-link admittance matches the array impedance exactly")
    return circuit.fsr_hz(a, w) / np.pi * np.log(np.abs(1 + zy) / den)


# ---------------------------------------------------------------------------
# flux noise


def dtheta_dlj(device: DeviceParams, lj_star, omega):
    """Derivative of the boundary phase shift with respect to L_J* (1/H)."""
    a = device.array
    w = np.asarray(omega, dtype=float)
    cj = device.squid.capacitance
    p = 2.0 / a.inductance * (1 - w ** 2 * a.inductance * a.capacitance)
    q = w * np.sqrt(a.inductance * a.ground_capacitance) / (2 * np.sqrt(1 - (w / a.plasma_frequency) ** 2))
    u = 1 - w ** 2 * lj_star * cj
    return p * q / (u ** 2 + q ** 2 * (u - p * lj_star) ** 2)


def flux_noise_broadening(device: DeviceParams, solution: scha.SchaSolution, flux, omega,
                          noise: FluxNoiseModel, scaling_correction=False, absorb_log=True):
    """Inhomogeneous broadening (Hz) of a mode at ``omega`` from flux noise.

    The SQUID asymmetry is neglected in dE_J/dflux, which overestimates the
    effect near half flux.  With ``scaling_correction`` the fluctuation of
    E_J* is taken as sqrt(2) (E_J*/E_J) dE_J instead of dE_J.
    """
    c = device.constants
    w = np.asarray(omega, dtype=float)
    d_flux = noise.rms_flux(absorb_log) / c.flux_quantum
    d_ej = device.squid.ej_zero * abs(np.sin(np.pi * flux)) * np.pi * d_flux
    if solution.ej_star <= 0:
        return np.zeros_like(w)
    if scaling_correction and solution.ej > 0:
        d_ej = d_ej * np.sqrt(2) * solution.ej_star / solution.ej
    d_lj = c.reduced_flux_quantum ** 2 / solution.ej_star ** 2 * d_ej
    d_theta = np.abs(dtheta_dlj(device, solution.lj_star, w)) * d_lj
    return circuit.fsr_hz(device.array, w) / np.pi * d_theta
