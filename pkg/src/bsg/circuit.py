"""Linear electrokinetics of a Josephson transmission-line array terminated by a SQUID.

Sign convention
---------------
Impedances follow the physics (``exp(-i w t)``) convention used throughout the
package: a capacitor has impedance ``i/(w C)`` and an inductor ``-i w L``.  This
is the complex conjugate of the usual engineering phasor convention, see
:func:`to_engineering` / :func:`from_engineering`.  Real parts (dissipation)
are identical in both conventions.

All frequencies are angular (rad/s).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import constants as sc

POLE_THRESHOLD = 1e-12


class PoleError(ValueError):
    """Raised when an impedance is evaluated at (or numerically on) a pole.

    Attributes
    ----------
    nearest : float or None
        Angular frequency of the nearest resonance, when known.
    """

    def __init__(self, msg, nearest=None):
        super().__init__(msg)
        self.nearest = nearest


@dataclass(frozen=True)
class Constants:
    reduced_planck: float = sc.hbar
    electron_charge: float = sc.e
    boltzmann: float = sc.k

    @property
    def planck(self) -> float:
        return 2 * np.pi * self.reduced_planck

    @property
    def resistance_quantum(self) -> float:
        """R_Q = h / (2e)^2."""
        return self.planck / (2 * self.electron_charge) ** 2

    @property
    def flux_quantum(self) -> float:
        """Superconducting flux quantum h / 2e."""
        return self.planck / (2 * self.electron_charge)

    @property
    def reduced_flux_quantum(self) -> float:
        """hbar / 2e, converts a Josephson energy into an inductance."""
        return self.reduced_planck / (2 * self.electron_charge)


CONSTANTS = Constants()


@dataclass(frozen=True)
class ArrayParams:
    """Homogeneous junction array.

    ``series_resistance`` is an optional loss floor (Ohm) placed in series with
    every array inductance; zero means lossless.
    """

    n_junctions: int
    inductance: float
    capacitance: float
    ground_capacitance: float
    series_resistance: float = 0.0

    def __post_init__(self):
        if int(self.n_junctions) != self.n_junctions or self.n_junctions < 1:
            raise ValueError("n_junctions must be an integer >= 1")
        for name in ("inductance", "capacitance", "ground_capacitance"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        if not self.series_resistance >= 0:
            raise ValueError("series_resistance must be >= 0")

    @property
    def plasma_frequency(self) -> float:
        return 1.0 / np.sqrt(self.inductance * (self.capacitance + self.ground_capacitance / 4))

    @property
    def lc_frequency(self) -> float:
        """Resonance of a single L || C cell, 1/sqrt(LC)."""
        return 1.0 / np.sqrt(self.inductance * self.capacitance)

    @property
    def characteristic_impedance(self) -> float:
        return np.sqrt(self.inductance / self.ground_capacitance)

    @property
    def screening_length(self) -> float:
        """sqrt(C/C_g) in sites."""
        return np.sqrt(self.capacitance / self.ground_capacitance)


@dataclass(frozen=True)
class SquidParams:
    ej_zero: float
    asymmetry: float
    capacitance: float

    def __post_init__(self):
        if not self.ej_zero >= 0:
            raise ValueError("ej_zero must be >= 0")
        if not 0 <= self.asymmetry < 1:
            raise ValueError("asymmetry must lie in [0, 1)")
        if not self.capacitance >= 0:
            raise ValueError("capacitance must be >= 0")

    def charging_energy(self, constants: Constants = CONSTANTS) -> float:
        """(2e)^2 / C_J."""
        return (2 * constants.electron_charge) ** 2 / self.capacitance


@dataclass(frozen=True)
class DeviceParams:
    array: ArrayParams
    squid: SquidParams
    feedline_impedance: float = 50.0
    feedline_reactance: float = 0.0
    constants: Constants = field(default_factory=Constants)

    def __post_init__(self):
        if not self.feedline_impedance > 0:
            raise ValueError("feedline_impedance must be > 0")

    def with_loss_floor(self, resistance: float) -> "DeviceParams":
        return replace(self, array=replace(self.array, series_resistance=resistance))


def ghz_energy(f_ghz, constants: Constants = CONSTANTS):
    """Energy of a photon of frequency ``f_ghz`` (GHz) in joules."""
    return constants.planck * np.asarray(f_ghz) * 1e9


def energy_ghz(energy, constants: Constants = CONSTANTS):
    return np.asarray(energy) / constants.planck / 1e9


def reference_device(n_junctions=4250, loss_floor=0.0) -> DeviceParams:
    """Device with the array and SQUID parameters of the reference experiment."""
    array = ArrayParams(n_junctions, 0.54e-9, 144e-15, 0.15e-15, loss_floor)
    squid = SquidParams(float(ghz_energy(27.5)), 0.02, 14.5e-15)
    return DeviceParams(array, squid, 50.0, 0.0)


def to_engineering(z):
    """Convert an impedance from the package convention to the j w engineering one."""
    return np.conj(z)


def from_engineering(z):
    return np.conj(z)


def ej_of_flux(squid: SquidParams, flux):
    """SQUID Josephson energy at reduced flux ``flux`` = Phi/Phi_Q."""
    x = np.pi * np.asarray(flux, dtype=float)
    return squid.ej_zero * np.sqrt(np.cos(x) ** 2 + squid.asymmetry ** 2 * np.sin(x) ** 2)


def inductance_from_energy(ej, constants: Constants = CONSTANTS):
    """L_J = (hbar/2e)^2 / E_J; zero energy maps to an infinite inductance."""
    ej = np.asarray(ej, dtype=float)
    with np.errstate(divide="ignore"):
        return constants.reduced_flux_quantum ** 2 / ej


def energy_from_inductance(lj, constants: Constants = CONSTANTS):
    lj = np.asarray(lj, dtype=float)
    with np.errstate(divide="ignore"):
        return constants.reduced_flux_quantum ** 2 / lj


def dispersion_omega(array: ArrayParams, k):
    """Plasma-mode frequency for real wavenumber ``k`` in (0, pi]."""
    k = np.asarray(k, dtype=float)
    if np.any(~((k > 0) & (k <= np.pi))):
        raise ValueError("wavenumber must lie in (0, pi]")
    s = np.sin(k / 2)
    L, C, Cg = array.inductance, array.capacitance, array.ground_capacitance
    return s / np.sqrt(L * (C * s ** 2 + Cg / 4))


def group_velocity(array: ArrayParams, k):
    """d omega / d k (rad/s per rad/site) on the propagating band."""
    k = np.asarray(k, dtype=float)
    s = np.sin(k / 2)
    L, C, Cg = array.inductance, array.capacitance, array.ground_capacitance
    return (L * Cg / 4) * (L * (C * s ** 2 + Cg / 4)) ** -1.5 * np.cos(k / 2) / 2


def _branch_admittances(array: ArrayParams, omega):
    omega = np.asarray(omega, dtype=complex)
    y_ground = -1j * omega * array.ground_capacitance
    y_series = 1.0 / (-1j * omega * array.inductance + array.series_resistance) - 1j * omega * array.capacitance
    return y_series, y_ground


def _wavenumber(y_series, y_ground):
    """Ladder wavenumber from the bulk nodal equation 4 Y_s sin^2(k/2) = -Y_g.

    Returns (k, e^{ik/2}) with the branch Im k >= 0 (decay into the array).
    """
    s2 = -y_ground / (4 * y_series)
    s = np.sqrt(s2)
    c = np.sqrt(1 - s2)
    up = c + 1j * s
    down = c - 1j * s
    use_down = np.abs(down) < np.abs(up) * (1 - 1e-13)
    half = np.where(use_down, down, up)
    k = -2j * np.log(half)
    return k, half


def dispersion_k(array: ArrayParams, omega):
    """Wavenumber at angular frequency ``omega``.

    Below the plasma frequency this is real; above it the evanescent branch
    with Im k > 0 is returned.
    """
    w = np.asarray(omega)
    if np.isrealobj(w):
        if np.any(w <= 0):
            raise ValueError("omega must be > 0")
        if np.any(np.abs(w / array.plasma_frequency - 1) < POLE_THRESHOLD):
            raise PoleError("omega at the plasma frequency", array.plasma_frequency)
    k, _ = _wavenumber(*_branch_admittances(array, w))
    if np.isrealobj(w) and array.series_resistance == 0:
        # clean tiny imaginary residue on the propagating band
        k = np.where(np.asarray(w) < array.plasma_frequency, k.real + 0j, k)
    return k


def _ladder(y_series, y_ground, n, check_poles=True, array=None):
    k, half = _wavenumber(y_series, y_ground)
    p = n + 1
    qp = np.exp(1j * k * p)  # e^{ik(N+1)}, bounded since Im k >= 0
    denom = qp * qp - 1.0
    if check_poles:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            sin_p = np.abs(denom) / (2 * np.abs(qp))
        bad = sin_p < POLE_THRESHOLD
        if np.any(bad):
            nearest = None
            if array is not None:
                kb = np.real(np.atleast_1d(k)[np.atleast_1d(bad)][0])
                m = max(1, int(round(kb * p / np.pi)))
                m = min(m, n + 1)
                nearest = float(dispersion_omega(array, m * np.pi / p))
            raise PoleError("impedance matrix evaluated on an array resonance", nearest)
    sin_half = -1j * (half - 1 / half) / 2
    cos_half = (half + 1 / half) / 2
    pref = 2 * sin_half / y_ground
    q_tail = np.exp(1j * k * (2 * n + 1.5))
    z_a = pref * 1j * (half + q_tail) / denom
    z_ab = pref * cos_half * 2j * qp / denom
    return z_a, z_ab


def array_impedances(array: ArrayParams, omega, check_poles=True):
    """End impedance Z_a and transfer impedance Z_ab of the open array."""
    y_s, y_g = _branch_admittances(array, omega)
    if np.any(y_s == 0):
        raise PoleError("omega at the single-cell resonance 1/sqrt(LC)", array.lc_frequency)
    return _ladder(y_s, y_g, array.n_junctions, check_poles and np.isrealobj(omega), array)


def impedance_matrix(array: ArrayParams, omega, check_poles=True):
    """2x2 impedance matrix between the two end islands of the array.

    Returns an array of shape ``omega.shape + (2, 2)``.
    """
    w = np.asarray(omega)
    if np.isrealobj(w) and np.any(w <= 0):
        raise ValueError("omega must be > 0")
    z_a, z_ab = array_impedances(array, w, check_poles)
    out = np.empty(np.shape(z_a) + (2, 2), dtype=complex)
    out[..., 0, 0] = z_a
    out[..., 1, 1] = z_a
    out[..., 0, 1] = z_ab
    out[..., 1, 0] = z_ab
    return out


def z_infinity(array: ArrayParams, omega):
    """Input impedance of the semi-infinite array.

    Closed form; above the plasma frequency the square root takes the branch
    matching evanescent decay into the array.
    """
    w = np.asarray(omega, dtype=float)
    L, C = array.inductance, array.capacitance
    det = 1 - w ** 2 * L * C
    if np.any(np.abs(det) < POLE_THRESHOLD):
        raise PoleError("omega at 1/sqrt(LC)", array.lc_frequency)
    root = np.sqrt(1 - (w / array.plasma_frequency) ** 2 + 0j)
    root = np.where(w > array.plasma_frequency, -root, root)
    return (array.characteristic_impedance * root + 0.5j * w * L) / det


def z_env(device: DeviceParams, omega, load=None, check_poles=True):
    """Impedance seen by the weak link: the array loaded by the feed-line.

    ``load`` defaults to Z_tl/2 (the two halves of the line in parallel).
    """
    if load is None:
        load = device.feedline_impedance / 2
    z_a, z_ab = array_impedances(device.array, omega, check_poles)
    if np.isinf(load):
        return z_a
    return z_a - z_ab ** 2 / (load + z_a)


def z_weak_linear(squid: SquidParams, lj_star, omega):
    """Linearized weak link: C_J in parallel with L_J*.

    ``lj_star`` may be ``np.inf`` (open inductor).
    """
    w = np.asarray(omega)
    y = w * squid.capacitance / 1j
    lj = np.asarray(lj_star, dtype=float)
    with np.errstate(divide="ignore"):
        y = y + np.where(np.isinf(lj), 0.0, 1j / (w * lj))
    scale = np.abs(w * squid.capacitance) + np.where(np.isinf(lj), 0.0, np.abs(1 / (w * lj)))
    if np.any(np.abs(y) <= POLE_THRESHOLD * scale):
        raise PoleError("weak link evaluated at its LC resonance",
                        float(1 / np.sqrt(np.min(lj) * squid.capacitance)))
    return 1.0 / y


def z_aw(device: DeviceParams, z_w, omega, check_poles=True):
    """Impedance seen from the feed-line: the array terminated by ``z_w``."""
    z_a, z_ab = array_impedances(device.array, omega, check_poles)
    z_w = np.asarray(z_w)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.isinf(z_w), z_a, z_a - z_ab ** 2 / (z_w + z_a))


def node_impedance(device: DeviceParams, z_aw_value):
    """Impedance of the T-junction node to ground."""
    z_line = device.feedline_impedance - 1j * device.feedline_reactance
    with np.errstate(divide="ignore"):
        return 1.0 / (2.0 / z_line + 1.0 / np.asarray(z_aw_value))


def s21(device: DeviceParams, z_w, omega, check_poles=True):
    """Transmission past the hanging array, S21 = 2 Z_N / Z_tl."""
    zaw = z_aw(device, z_w, omega, check_poles)
    return 2 * node_impedance(device, zaw) / device.feedline_impedance


def fsr_hz(array: ArrayParams, omega):
    """Local free spectral range (Hz) at angular frequency ``omega`` below omega_p."""
    k = np.real(dispersion_k(array, omega))
    return group_velocity(array, k) / (2 * (array.n_junctions + 0.5))
