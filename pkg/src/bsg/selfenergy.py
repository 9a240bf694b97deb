"""Second-order self-consistent self-energy of the boundary junction.

The weak link is treated perturbatively in E_J around the open (L_J* = inf)
junction.  The phase-phase propagator G of the boundary node and the
self-energy Sigma are solved jointly:

    Sigma(t) = E_v delta(t) + const + (E_v^2/hbar) [sin G(t) - G(t)]
    1/G(w)   = 1/G0(w) - Sigma_reg(w)/hbar

with the vertex energy E_v = E_J exp(-<phi^2>/2) taken from the dressed G.
At T = 0 the time-ordered functions are used directly.  At T > 0 the 2x2
contour (Keldysh) matrices are used; temperature enters only through the
equilibrium occupation of the spectral weight.

Conventions
-----------
* frequency grid: ``np.fft.fftfreq`` ordering, symmetric around 0 except for
  the unpaired Nyquist bin at -omega_max;
* time transform: G(t) = sum_w G(w) exp(-i w t) dw / 2pi  (``np.fft.fft``);
* frequency transform: F(w) = sum_t F(t) exp(i w t) dt  (``np.fft.ifft`` * n);
* sign: passive damping gives Im Sigma^R(w) <= 0 for w > 0, the same sign
  as Im G^R and as Im of a passive impedance divided by i.

Contour components are stored in the (++, +-, -+, --) layout with the vertex
sign sigma*sigma' attached to the self-energy, so that

    Sigma^R = (Sigma_pp + Sigma_pm - Sigma_mp - Sigma_mm) / 2.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import circuit
from .circuit import Constants, DeviceParams

log = logging.getLogger(__name__)

# rotation to the (Keldysh, retarded / advanced) basis
_ROT = np.array([[1.0, 1.0], [1.0, -1.0]])


class GridError(ValueError):
    pass


class AliasingError(RuntimeError):
    pass


class FDTViolation(RuntimeError):
    pass


class InfraredDivergence(RuntimeError):
    """The unregularized propagator has a log-divergent equal-time value."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class FrequencyGrid:
    """Symmetric FFT frequency grid (rad/s).

    Parameters
    ----------
    n_points : int
        Number of points, a power of two.
    omega_max : float
        Largest |omega|; the grid spacing is 2 omega_max / n_points.
    """

    n_points: int
    omega_max: float

    def __post_init__(self):
        n = int(self.n_points)
        if n != self.n_points or n < 8 or n & (n - 1):
            raise GridError(f"n_points must be a power of two >= 8, got {self.n_points}")
        if not (np.isfinite(self.omega_max) and self.omega_max > 0):
            raise GridError("omega_max must be finite and > 0")

    @classmethod
    def for_device(cls, device: DeviceParams, n_points=2 ** 18, cutoff_factor=4.2):
        return cls(n_points, cutoff_factor * device.array.plasma_frequency)

    @property
    def spacing(self) -> float:
        return 2.0 * self.omega_max / self.n_points

    @property
    def omega(self) -> np.ndarray:
        return np.fft.fftfreq(self.n_points, d=1.0 / (self.n_points * self.spacing))

    @property
    def time_step(self) -> float:
        return 2 * np.pi / (self.n_points * self.spacing)

    @property
    def positive(self) -> slice:
        """Indices of the strictly positive frequencies."""
        return slice(1, self.n_points // 2)

    def index_of(self, omega) -> np.ndarray:
        return np.rint(np.asarray(omega) / self.spacing).astype(int)

    def validate(self, device: DeviceParams, floor_check=True, band_fraction=0.9, e_cutoff=None):
        """Check resolution and support against ``device``.

        The free spectral range vanishes at omega_p, so it is required to be
        resolved up to ``band_fraction`` * omega_p only.  With ``e_cutoff``
        the zero mode pinned by the cutoff energy must be resolved too: it
        relaxes at (E_cut/hbar) / (R_Q Re Y_env(0) / 2pi).
        """
        a = device.array
        if self.omega_max < 4 * a.plasma_frequency:
            raise GridError("omega_max must be at least 4 omega_p")
        fsr = 2 * np.pi * float(circuit.fsr_hz(a, band_fraction * a.plasma_frequency))
        if self.spacing > fsr / 20:
            raise GridError(f"grid spacing {self.spacing:.3e} rad/s does not resolve the FSR {fsr:.3e}")
        if floor_check:
            width = a.series_resistance / a.inductance
            if width == 0:
                raise GridError("a lossless environment has delta-like modes; set a loss floor")
            if self.spacing > width:
                raise GridError(f"grid spacing {self.spacing:.3e} exceeds the mode width {width:.3e}; "
                                "refine the grid or raise the loss floor")
        if e_cutoff is not None:
            c = device.constants
            y0 = 1.0 / circuit.z_env(device, np.array([self.spacing]), check_poles=False)[0]
            stiffness = c.resistance_quantum * y0.real / (2 * np.pi)
            rate = e_cutoff / c.reduced_planck / stiffness
            if self.spacing > 1.2 * rate:
                raise GridError(f"grid spacing {self.spacing:.3e} does not resolve the cutoff-pinned zero mode "
                                f"(relaxation rate {rate:.3e}); refine the grid or raise E_cutoff")

    def to_time(self, values):
        return np.fft.fft(values, axis=0) * (self.spacing / (2 * np.pi))

    def to_frequency(self, values):
        return np.fft.ifft(values, axis=0) * (self.n_points * self.time_step)


@dataclass
class TimeOrderedGF:
    """Zero-temperature time-ordered phase-phase propagator sampled on a grid."""

    grid: FrequencyGrid
    values: np.ndarray

    def equal_time(self) -> complex:
        return complex(self.grid.to_time(self.values)[0])

    @property
    def retarded(self) -> np.ndarray:
        w = self.grid.omega
        return np.where(w >= 0, self.values, np.conj(self.values))


@dataclass
class KeldyshGF:
    """Contour-ordered propagator, shape (n, 2, 2) in (++, +-, -+, --) layout."""

    grid: FrequencyGrid
    temperature: float
    matrix: np.ndarray

    @property
    def rotated(self) -> np.ndarray:
        return 0.5 * _ROT @ self.matrix @ _ROT

    @property
    def retarded(self) -> np.ndarray:
        return self.rotated[:, 0, 1]

    @property
    def advanced(self) -> np.ndarray:
        return self.rotated[:, 1, 0]

    @property
    def keldysh(self) -> np.ndarray:
        return self.rotated[:, 0, 0]

    def fdt_residual(self, constants: Constants = circuit.CONSTANTS) -> float:
        return fdt_residual(self.grid, self.retarded, self.keldysh, self.temperature, constants)


@dataclass
class SelfEnergy:
    """Regularized retarded (or T=0 time-ordered) self-energy in joules."""

    grid: FrequencyGrid
    sigma: np.ndarray
    vertex_energy: float
    e_cutoff: float
    order: str = "second"
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    temperature: float = 0.0
    phi_sq: float = 0.0
    keldysh: np.ndarray | None = None
    fdt_residual: float = 0.0
    history: list = field(default_factory=list)
    kind: str = "time-ordered"

    @property
    def retarded(self) -> np.ndarray:
        if self.kind == "retarded":
            return self.sigma
        w = self.grid.omega
        return np.where(w >= 0, self.sigma, np.conj(self.sigma))

    def at(self, omega) -> np.ndarray:
        """Retarded Sigma interpolated at positive angular frequencies."""
        w = np.asarray(omega, dtype=float)
        if np.any(w <= 0) or np.any(w >= self.grid.omega_max):
            raise ValueError("omega outside (0, omega_max)")
        sl = self.grid.positive
        axis = self.grid.omega[sl]
        s = self.sigma[sl]
        return np.interp(w, axis, s.real) + 1j * np.interp(w, axis, s.imag)

    def weak_link_impedance(self, cj, omega, constants: Constants = circuit.CONSTANTS):
        return weak_link_impedance(self.at(omega), cj, omega, constants)


# ---------------------------------------------------------------------------
# bare propagator and environments


def device_admittance(device: DeviceParams) -> Callable:
    """Y_env(w) for w > 0 of the array plus feed-line."""

    def admittance(w):
        return 1.0 / circuit.z_env(device, w, check_poles=False)
    return admittance


def inverse_g0(grid: FrequencyGrid, admittance: Callable, cj, constants: Constants = circuit.CONSTANTS):
    """1/G0^R on the grid: (i w R_Q / 2pi)(Y_env(w) - i w C_J), zero at w = 0."""
    w = grid.omega
    wp = np.abs(w)
    wp[0] = grid.spacing  # placeholder, overwritten below
    r_q = constants.resistance_quantum
    pos = 1j * wp * r_q / (2 * np.pi) * (admittance(wp) - 1j * wp * cj)
    pos[0] = 0.0
    return np.where(w >= 0, pos, np.conj(pos)), pos


def g0_timeordered(device: DeviceParams, flux, grid: FrequencyGrid, admittance: Callable | None = None,
                   validate=True) -> TimeOrderedGF:
    """Bare (E_J = 0) time-ordered propagator 2pi Z0(|w|) / (i |w| R_Q).

    The value at w = 0 is infinite for an environment with a finite DC
    resistance; it is set to 0 there, the infrared weight being handled by
    the regularization counter-term in the dressed propagator.
    """
    if validate and admittance is None:
        grid.validate(device)
    admittance = admittance or device_admittance(device)
    _, pos = inverse_g0(grid, admittance, device.squid.capacitance, device.constants)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(pos == 0, 0.0, 1.0 / pos)
    return TimeOrderedGF(grid, g)


def check_infrared(gf: TimeOrderedGF, threshold=1e-3):
    """Raise :class:`InfraredDivergence` when <phi^2> grows like log(1/w_min).

    The log slope is -(1/pi) w Im G(w) at the lowest grid frequencies; it is
    2 Z_env(0)/R_Q for an unregularized propagator and vanishes once the
    boundary node has a finite inductive shunt.
    """
    w = gf.grid.omega[1:4]
    slope = np.abs(w * gf.values[1:4].imag).max() / np.pi
    if slope > threshold:
        raise InfraredDivergence(f"equal-time propagator diverges logarithmically (slope {slope:.3g}); "
                                 "the Debye-Waller factor would vanish")
    return slope


def vertex_energy(ej, g_equal_time) -> float:
    """E_J exp(-i G(t=0)/2); real for G(0) = -i <phi^2>."""
    val = ej * np.exp(-1j * complex(g_equal_time) / 2)
    return float(val.real)


def weak_link_impedance(sigma, cj, omega, constants: Constants = circuit.CONSTANTS):
    """Z_w = [w C_J / i + 2 pi i Sigma / (R_Q hbar w)]^-1."""
    w = np.asarray(omega, dtype=float)
    r_q = constants.resistance_quantum
    y = w * cj / 1j + 2j * np.pi * np.asarray(sigma) / (r_q * constants.reduced_planck * w)
    return 1.0 / y


# ---------------------------------------------------------------------------
# kernels


def _sin_kernel(ej, g, phi_sq):
    """E_v^2 [sin G - G] written with the Debye-Waller factor folded in.

    Using E_v^2 sin G = E_J^2 (exp(iG - phi^2) - exp(-iG - phi^2)) / 2i keeps
    every exponent bounded even when phi^2 is large.
    """
    ev2 = ej ** 2 * np.exp(-phi_sq)
    return (ej ** 2 / 2j) * (np.exp(1j * g - phi_sq) - np.exp(-1j * g - phi_sq)) - ev2 * g


def _cos_constant(ej, g, phi_sq, grid: FrequencyGrid, hbar):
    """i (E_v^2/hbar) int dt [cos G - 1 + G^2/2], frequency independent."""
    ev2 = ej ** 2 * np.exp(-phi_sq)
    integrand = (ej ** 2 / 2) * (np.exp(1j * g - phi_sq) + np.exp(-1j * g - phi_sq)) - ev2 * (1 - g ** 2 / 2)
    return 1j * np.sum(integrand) * grid.time_step / hbar


def sigma_second_order(ej, g_time, grid: FrequencyGrid, constants: Constants = circuit.CONSTANTS,
                       leakage_threshold=1e-2) -> SelfEnergy:
    """Unregularized time-ordered self-energy from a time-domain propagator.

    Parameters
    ----------
    ej : float
        Bare Josephson energy (J).
    g_time : ndarray
        G(t) on the FFT time grid of ``grid``.
    leakage_threshold : float
        Largest allowed |Im Sigma| in the outer tenth of the frequency window,
        relative to its maximum; larger values signal wrap-around aliasing.
    """
    hbar = constants.reduced_planck
    g = np.asarray(g_time, dtype=complex)
    phi_sq = float(-g[0].imag)
    ev = vertex_energy(ej, g[0])
    kernel = _sin_kernel(ej, g, phi_sq)
    sig = grid.to_frequency(kernel) / hbar
    sig = sig + ev + _cos_constant(ej, g, phi_sq, grid, hbar)
    _check_leakage(grid, sig, leakage_threshold)
    return SelfEnergy(grid, sig, ev, 0.0, phi_sq=phi_sq)


def _check_leakage(grid, sig, threshold):
    im = np.abs(np.asarray(sig).imag)
    peak = im.max()
    if peak == 0 or threshold is None:
        return
    edge = np.abs(grid.omega) > 0.9 * grid.omega_max
    ratio = im[edge].max() / peak
    if ratio > threshold:
        raise AliasingError(f"self-energy leaks to the grid edge ({ratio:.2e} of peak); raise omega_max")


def regularize(sigma: SelfEnergy, e_cutoff) -> SelfEnergy:
    """Sigma_reg = Sigma - Sigma(0) + E_cutoff."""
    if not e_cutoff > 0:
        raise ValueError("e_cutoff must be > 0")
    s = sigma.sigma - sigma.sigma[0] + e_cutoff
    return replace(sigma, sigma=s, e_cutoff=float(e_cutoff))


# ---------------------------------------------------------------------------
# thermal factors


def _weights(grid: FrequencyGrid, temperature, constants: Constants):
    """w (1 + n(w)) and w n(w), finite at w = 0."""
    w = grid.omega
    if temperature == 0:
        return np.where(w > 0, w, 0.0), np.where(w < 0, -w, 0.0)
    kt = constants.boltzmann * temperature / constants.reduced_planck
    x = w / kt
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        up = np.where(w == 0, kt, w / -np.expm1(-x))
        lo = np.where(w == 0, kt, w / np.expm1(x))
    return up, lo


def coth_factor(grid: FrequencyGrid, temperature, constants: Constants = circuit.CONSTANTS):
    w = grid.omega
    if temperature == 0:
        return np.sign(w)
    x = constants.reduced_planck * w / (2 * constants.boltzmann * temperature)
    with np.errstate(divide="ignore"):
        return 1.0 / np.tanh(x)


def fdt_residual(grid, retarded, keldysh, temperature, constants: Constants = circuit.CONSTANTS):
    """max |X^K - 2i Im X^R coth| / max |X^K| over w != 0."""
    ok = grid.omega != 0
    with np.errstate(invalid="ignore"):
        pred = 2j * np.asarray(retarded).imag * coth_factor(grid, temperature, constants)
    scale = np.abs(keldysh[ok]).max()
    if scale == 0:
        return 0.0
    return float(np.abs(keldysh[ok] - pred[ok]).max() / scale)


def _spectral_over_omega(grid, retarded):
    """Im G^R / w with the w -> 0 limit taken from the neighbours."""
    w = grid.omega
    a = np.asarray(retarded).imag
    aw = np.where(w == 0, 0.0, a / np.where(w == 0, 1.0, w))
    aw[0] = 0.5 * (aw[1] + aw[-1])
    return aw


def greater_lesser(grid, retarded, temperature, constants: Constants = circuit.CONSTANTS):
    """Frequency-domain G^> and G^< of an equilibrium propagator."""
    up, lo = _weights(grid, temperature, constants)
    aw = _spectral_over_omega(grid, retarded)
    return 2j * aw * up, 2j * aw * lo


def contour_from_retarded(retarded, keldysh):
    """Assemble (n,2,2) contour matrices from retarded and Keldysh parts."""
    gr = np.asarray(retarded)
    ga = np.conj(gr)
    gk = np.asarray(keldysh)
    out = np.empty(gr.shape + (2, 2), dtype=complex)
    out[:, 0, 0] = 0.5 * (gk + gr + ga)
    out[:, 0, 1] = 0.5 * (gk - gr + ga)
    out[:, 1, 0] = 0.5 * (gk + gr - ga)
    out[:, 1, 1] = 0.5 * (gk - gr - ga)
    return out


def retarded_from_keldysh(g: KeldyshGF) -> np.ndarray:
    """G^R from the basis rotation of the contour matrix."""
    return g.retarded


def sigma_retarded(components) -> np.ndarray:
    """Sigma^R = (S_pp + S_pm - S_mp - S_mm)/2 from (n,2,2) contour components."""
    c = np.asarray(components)
    return 0.5 * (c[:, 0, 0] + c[:, 0, 1] - c[:, 1, 0] - c[:, 1, 1])


def sigma_keldysh_component(components) -> np.ndarray:
    """Keldysh part of a self-energy stored with vertex signs."""
    c = np.asarray(components)
    return 0.5 * (c[:, 0, 0] - c[:, 0, 1] - c[:, 1, 0] + c[:, 1, 1])


def inverse_g0_contour(grid, admittance, cj, temperature, constants: Constants = circuit.CONSTANTS):
    """Contour-space 1/G0, shape (n,2,2).

    Built from 1/G0^R and its equilibrium Keldysh block; the w = 0 bin uses the
    limit w coth(hbar w / 2kT) -> 2kT/hbar.
    """
    w = grid.omega
    inv_r, pos = inverse_g0(grid, admittance, cj, constants)
    r_q = constants.resistance_quantum
    wp = np.abs(w)
    wp[0] = grid.spacing
    re_y = np.real(admittance(wp))
    if temperature == 0:
        w_coth = np.abs(w)
    else:
        kt = constants.boltzmann * temperature / constants.reduced_planck
        with np.errstate(divide="ignore", invalid="ignore"):
            w_coth = np.where(w == 0, 2 * kt, w / np.tanh(w / (2 * kt)))
    # (G0^-1)^K = -(G^R)^-1 G^K (G^A)^-1 = 2 i (w R_Q/2pi) Re Y coth
    re_y = np.where(w == 0, re_y[1], re_y)
    inv_k = 2j * w_coth * r_q / (2 * np.pi) * re_y
    inv_a = np.conj(inv_r)
    out = np.empty((grid.n_points, 2, 2), dtype=complex)
    # inverse of a contour matrix in the stored layout; the inverse carries
    # vertex signs like a self-energy
    out[:, 0, 0] = 0.5 * (inv_r + inv_a + inv_k)
    out[:, 0, 1] = -0.5 * (inv_k - inv_r + inv_a)
    out[:, 1, 0] = -0.5 * (inv_k + inv_r - inv_a)
    out[:, 1, 1] = 0.5 * (inv_k - inv_r - inv_a)
    return out


def _contour_self_energy(ej, g_gt, g_lt, grid, hbar):
    """(n,2,2) self-energy components (vertex signs included), without the
    frequency-independent diagonal terms."""
    n = grid.n_points
    k_gt = _sin_kernel(ej, g_gt, float(-g_gt[0].imag))
    k_lt = _sin_kernel(ej, g_lt, float(-g_gt[0].imag))
    step = np.zeros(n)
    step[1:n // 2] = 1.0
    step[0] = step[n // 2] = 0.5
    back = 1.0 - step
    comp = np.empty((n, 2, 2), dtype=complex)
    comp[:, 0, 0] = step * k_gt + back * k_lt
    comp[:, 1, 1] = step * k_lt + back * k_gt
    comp[:, 0, 1] = -k_lt
    comp[:, 1, 0] = -k_gt
    return grid.to_frequency(comp) / hbar


# ---------------------------------------------------------------------------
# Dyson self-consistency


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 200
    mixing: float = 0.3
    e_cutoff: float | None = None
    cutoff_fraction: float = 0.05
    fdt_abort: float = 1e-6
    leakage_threshold: float = 1e-2
    continuation_steps: int = 8
    anderson_depth: int = 6
    stall_window: int = 30
    continuation_start: float = 0.3

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if not 0 < self.mixing <= 1:
            raise ValueError("mixing must lie in (0, 1]")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")


def default_cutoff(device: DeviceParams, fraction=0.05):
    """E_cutoff as a fraction of the SQUID energy at half flux."""
    return fraction * float(circuit.ej_of_flux(device.squid, 0.5))


def dyson_solve(device: DeviceParams, flux, temperature, grid: FrequencyGrid,
                opts: SolverOptions | None = None, admittance: Callable | None = None,
                ej=None, validate=True, raise_on_failure=False):
    """Self-consistent second-order solution at one flux point.

    Returns ``(gf, sigma)`` where ``gf`` is a :class:`TimeOrderedGF` at T = 0
    or a :class:`KeldyshGF` at T > 0 and ``sigma`` the regularized
    :class:`SelfEnergy`.  Non-convergence is reported through
    ``sigma.converged`` (or raised as :class:`ConvergenceError` when
    ``raise_on_failure``).
    """
    opts = opts or SolverOptions()
    if not temperature >= 0:
        raise ValueError("temperature must be >= 0")
    e_cut = opts.e_cutoff if opts.e_cutoff is not None else default_cutoff(device, opts.cutoff_fraction)
    if validate and admittance is None:
        grid.validate(device, e_cutoff=e_cut)
    admittance = admittance or device_admittance(device)
    c = device.constants
    if ej is None:
        ej = float(circuit.ej_of_flux(device.squid, flux))
    cj = device.squid.capacitance
    if temperature == 0:
        return _solve_time_ordered(grid, admittance, cj, ej, e_cut, opts, c, raise_on_failure)
    return _solve_keldysh(grid, admittance, cj, ej, e_cut, temperature, opts, c, raise_on_failure)


def _mix_loop(step_fn, g_start, opts, label):
    """Linear mixing with halving on oscillation.  Returns the loop state."""
    g = g_start
    eta = opts.mixing
    prev = np.inf
    best = (np.inf, None)
    best_it = 0
    history = []
    out = None
    for it in range(1, opts.max_iter + 1):
        g_new, out = step_fn(g)
        diff = float(np.abs(g_new - g).max() / np.abs(g).max())
        history.append(diff)
        if diff < best[0]:
            best = (diff, out)
            best_it = it
        if diff < opts.tol:
            return g_new, out, it, diff, True, history
        if it - best_it >= opts.stall_window:
            log.info("%s loop stalled at residual %.2e", label, best[0])
            return g, best[1], it, best[0], False, history
        if diff > prev:
            eta = max(0.5 * eta, 1e-3)
        prev = diff
        g = g + eta * (g_new - g)
    log.info("%s loop stopped at residual %.2e after %d iterations", label, best[0], opts.max_iter)
    return g, best[1], opts.max_iter, best[0], False, history


def _anderson_loop(step_fn, g_start, opts, label):
    """Anderson (type II) acceleration of the same fixed-point map.

    Deterministic: a least-squares combination of the last ``anderson_depth``
    residuals replaces the plain mixing step.
    """
    g = g_start
    xs, fs, history = [], [], []
    best = (np.inf, None)
    beta = opts.mixing
    for it in range(1, opts.max_iter + 1):
        g_new, out = step_fn(g)
        r = g_new - g
        diff = float(np.abs(r).max() / np.abs(g).max())
        history.append(diff)
        if diff < best[0]:
            best = (diff, out)
        if diff < opts.tol:
            return g_new, out, it, diff, True, history
        xs.append(g)
        fs.append(r)
        if len(xs) > opts.anderson_depth + 1:
            xs.pop(0)
            fs.pop(0)
        if len(xs) > 1:
            d_f = np.stack([b - a for a, b in zip(fs[:-1], fs[1:])], axis=1)
            d_x = np.stack([b - a for a, b in zip(xs[:-1], xs[1:])], axis=1)
            lhs = np.vstack([d_f.real, d_f.imag])
            rhs = np.concatenate([r.real, r.imag])
            gamma = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
            g = g + beta * r - (d_x + beta * d_f) @ gamma
        else:
            g = g + beta * r
    log.info("%s Anderson loop stopped at residual %.2e", label, best[0])
    return g, best[1], opts.max_iter, best[0], False, history


def _continued(make_step, g_start, ej, opts, label):
    """Linear mixing first, then Anderson acceleration, then a geometric E_J
    ramp from a fraction of its value with warm starts."""
    out = _mix_loop(make_step(ej), g_start, opts, label)
    if out[4]:
        return out
    if opts.anderson_depth > 0:
        log.info("%s: linear mixing stalled, retrying with Anderson acceleration", label)
        acc = _anderson_loop(make_step(ej), g_start, opts, label)
        acc = acc[:2] + (out[2] + acc[2],) + acc[3:5] + (list(out[5]) + list(acc[5]),)
        if acc[4]:
            return acc
        out = acc
    if opts.continuation_steps < 2:
        return out
    log.info("%s: direct iteration failed, using E_J continuation", label)
    g = g_start
    total = out[2]
    hist = list(out[5])
    for e in np.geomspace(opts.continuation_start * ej, ej, opts.continuation_steps):
        g, payload, it, res, ok, h = _mix_loop(make_step(e), g, opts, label)
        total += it
        hist.extend(h)
        if not ok:
            break
    return g, payload, total, res, ok, hist


def _solve_time_ordered(grid, admittance, cj, ej, e_cut, opts, c, raise_on_failure):
    hbar = c.reduced_planck
    w = grid.omega
    _, pos = inverse_g0(grid, admittance, cj, c)
    inv_t = _even(grid, pos)

    def dress(sig_reg):
        return 1.0 / (inv_t - sig_reg / hbar)

    g0 = dress(np.full(grid.n_points, e_cut, dtype=complex))

    def make_step(e):
        def step(g):
            gt = grid.to_time(g)
            raw = sigma_second_order(e, gt, grid, c, opts.leakage_threshold)
            reg = regularize(raw, e_cut)
            return dress(reg.sigma), reg
        return step

    if ej == 0:
        sig = SelfEnergy(grid, np.full(grid.n_points, e_cut, dtype=complex), 0.0, e_cut,
                         iterations=1, phi_sq=float(-grid.to_time(g0)[0].imag))
        return TimeOrderedGF(grid, g0), sig
    g, reg, it, res, ok, hist = _continued(make_step, g0, ej, opts, "time-ordered")
    reg = replace(reg, converged=ok, iterations=it, residual=res, history=hist)
    if not ok and raise_on_failure:
        raise ConvergenceError(f"no convergence, best residual {res:.2e}", reg)
    return TimeOrderedGF(grid, dress(reg.sigma)), reg


def _even(grid, pos):
    """Even extension of positive-frequency samples onto the FFT grid."""
    n = grid.n_points
    out = np.empty(n, dtype=complex)
    out[: n // 2] = pos[: n // 2]
    out[n // 2 + 1:] = pos[1: n // 2][::-1]
    out[n // 2] = pos[n // 2 - 1]  # unpaired Nyquist bin: nearest neighbour
    return out


def _solve_keldysh(grid, admittance, cj, ej, e_cut, temperature, opts, c, raise_on_failure):
    hbar = c.reduced_planck
    inv0 = inverse_g0_contour(grid, admittance, cj, temperature, c)
    sz = np.diag([1.0, -1.0])
    inv_r, _ = inverse_g0(grid, admittance, cj, c)

    def dyson(sig_components):
        return np.linalg.inv(inv0 - sig_components / hbar)

    def assemble(ret_sigma, kel_sigma):
        # contour self-energy with vertex signs from its retarded / Keldysh parts
        sr = ret_sigma
        sa = np.conj(sr)
        out = np.empty((grid.n_points, 2, 2), dtype=complex)
        out[:, 0, 0] = 0.5 * (sr + sa + kel_sigma)
        out[:, 0, 1] = -0.5 * (kel_sigma - sr + sa)
        out[:, 1, 0] = -0.5 * (kel_sigma + sr - sa)
        out[:, 1, 1] = 0.5 * (kel_sigma - sr - sa)
        return out

    start = assemble(np.full(grid.n_points, e_cut, dtype=complex), np.zeros(grid.n_points, dtype=complex))
    g_mat = dyson(start)
    state = {"fdt": 0.0}

    def make_step(ej):
        return lambda gr: step(gr, ej)

    def step(gr, ej):
        g_gt, g_lt = greater_lesser(grid, gr, temperature, c)
        t_gt = grid.to_time(g_gt)
        t_lt = grid.to_time(g_lt)
        phi_sq = float(-t_gt[0].imag)
        ev = vertex_energy(ej, t_gt[0])
        comp = _contour_self_energy(ej, t_gt, t_lt, grid, hbar)
        s_r = sigma_retarded(comp)
        s_k = sigma_keldysh_component(comp)
        _check_leakage(grid, s_r, opts.leakage_threshold)
        fdt_s = fdt_residual(grid, s_r, s_k, temperature, c)
        s_reg = s_r - s_r[0] + e_cut
        comp_reg = comp + (e_cut - s_r[0]) * sz
        mat = dyson(comp_reg)
        kgf = KeldyshGF(grid, temperature, mat)
        fdt_g = kgf.fdt_residual(c)
        state["fdt"] = max(fdt_s, fdt_g)
        if state["fdt"] > opts.fdt_abort:
            raise FDTViolation(f"fluctuation-dissipation residual {state['fdt']:.2e}")
        sig = SelfEnergy(grid, s_reg, ev, e_cut, temperature=temperature, phi_sq=phi_sq,
                         keldysh=s_k, fdt_residual=state["fdt"], kind="retarded")
        return kgf.retarded, (sig, kgf)

    gr0 = KeldyshGF(grid, temperature, g_mat).retarded
    if ej == 0:
        sig = SelfEnergy(grid, np.full(grid.n_points, e_cut, dtype=complex), 0.0, e_cut, iterations=1,
                         temperature=temperature, keldysh=np.zeros(grid.n_points, dtype=complex),
                         kind="retarded")
        return KeldyshGF(grid, temperature, g_mat), sig
    _, (sig, kgf), it, res, ok, hist = _continued(make_step, gr0, ej, opts, "keldysh")
    sig = replace(sig, converged=ok, iterations=it, residual=res, history=hist)
    if not ok and raise_on_failure:
        raise ConvergenceError(f"no convergence, best residual {res:.2e}", sig)
    return kgf, sig


# ---------------------------------------------------------------------------
# diagnostics


def kramers_kronig_residual(grid: FrequencyGrid, sigma_r, band):
    """Relative in-band mismatch between Re Sigma^R and the Hilbert transform of Im Sigma^R.

    A causal response with a constant high-frequency limit has a time-domain
    image that vanishes for t < 0; the real part is rebuilt from the
    imaginary part through that property.
    """
    s = np.asarray(sigma_r)
    im_t = grid.to_time(1j * s.imag)
    n = grid.n_points
    sgn = np.zeros(n)
    sgn[1:n // 2] = 1.0
    sgn[n // 2 + 1:] = -1.0
    re_rebuilt = grid.to_frequency(sgn * im_t).real
    w = grid.omega
    sel = (w >= band[0]) & (w <= band[1])
    # compare the frequency-dependent parts; the constant is fixed at band centre
    d = (s.real - re_rebuilt)[sel]
    d = d - np.median(d)
    return float(np.abs(d).max() / np.abs(s[sel]).max())


def gamma_j_from_sigma(device: DeviceParams, sigma: SelfEnergy, omega, reference_sigma=None):
    """Boundary damping (Hz) of standing modes from the weak-link admittance.

    Uses the round-trip reflection formula with the weak-link admittance
    built from Sigma; ``reference_sigma`` (defaults to Re Sigma only) is
    subtracted so that only the dissipative part remains.
    """
    from .losses import gamma_boundary

    w = np.asarray(omega, dtype=float)
    s = sigma.at(w)
    cj = device.squid.capacitance
    y = 1.0 / weak_link_impedance(s, cj, w, device.constants)
    return gamma_boundary(device, y, w)


def renormalized_frequency(device: DeviceParams, sigma: SelfEnergy, f_min=0.2e9, f_max=None):
    """omega_J* where hbar^-1 (hbar/2e)^2 C_J w^2 = Re Sigma_reg(w), lowest root."""
    from scipy import optimize

    c = device.constants
    cj = device.squid.capacitance
    scale = c.reduced_flux_quantum ** 2 * cj
    f_max = f_max or 0.95 * device.array.plasma_frequency / (2 * np.pi)
    w = np.linspace(2 * np.pi * f_min, 2 * np.pi * f_max, 4000)
    g = scale * w ** 2 - sigma.at(w).real
    idx = np.nonzero(np.sign(g[:-1]) != np.sign(g[1:]))[0]
    if len(idx) == 0:
        return np.nan

    def fn(x):
        return scale * x ** 2 - float(sigma.at(x).real)
    return float(optimize.brentq(fn, w[idx[0]], w[idx[0] + 1]))


def scaling_exponent_check(alpha, cutoff_ratio, max_points=2 ** 23, return_details=False):
    """Fit the power-law exponent of Im Sigma for an ohmic boundary junction.

    The bare propagator is 1/(i|w|/(2pi alpha) (1 - i|w|/w_c) - E*/hbar), i.e.
    a junction of energy E* shunted by alpha R_Q with a capacitive cutoff w_c.
    Sigma is evaluated at second order with this propagator, in units where
    E*/hbar = 1.  The slope of log|Im Sigma| against log w is fitted between
    ten times the peak of |Im Sigma| and w_c/10.  When that range is shorter
    than a decade there is no scaling regime; the decay above the peak (up to
    3 w_c) is fitted instead and the details report how a power law compares
    with an exponential there.

    Returns the slope (and a details dict when ``return_details``).
    """
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    if cutoff_ratio <= 1:
        raise ValueError("cutoff_ratio must exceed 1")
    e_star = 1.0
    w_c = cutoff_ratio * e_star

    def size(w_max, step):
        return 1 << int(np.ceil(np.log2(2 * w_max / step)))

    w_max, step = 8 * w_c, 0.05
    if size(w_max, step) > max_points:
        w_max, step = 4 * w_c, 0.1
    n_points = max(size(w_max, step), 1024)
    if n_points > max_points:
        raise GridError(f"cutoff_ratio {cutoff_ratio:g} needs {n_points} points (> max_points)")
    grid = FrequencyGrid(n_points, w_max)
    w = grid.omega
    aw = np.abs(w)
    g = 1.0 / (1j * aw / (2 * np.pi * alpha) * (1 - 1j * aw / w_c) - e_star)
    gt = grid.to_time(g)
    phi_sq = float(-gt[0].imag)
    # E_J scaled out: in units hbar = 1 and E_v = 1 the kernel is sin G - G
    kernel = np.sin(gt) - gt
    sig = grid.to_frequency(kernel)
    pos = grid.positive
    w_peak = float(w[pos][np.argmax(np.abs(sig[pos].imag))])
    fit_lo, fit_hi = 10 * w_peak, w_c / 10
    scaling_regime = fit_hi >= 10 * fit_lo
    if not scaling_regime:
        fit_lo, fit_hi = w_peak, min(3 * w_c, 0.9 * w_max)
    sel = (w >= fit_lo) & (w <= fit_hi)
    x = np.log(w[sel])
    y = np.log(np.abs(sig[sel].imag))
    coef = np.polyfit(x, y, 1)
    slope = float(coef[0])
    if not return_details:
        return slope
    half = x < 0.5 * (x[0] + x[-1])
    halves = (float(np.polyfit(x[half], y[half], 1)[0]), float(np.polyfit(x[~half], y[~half], 1)[0]))
    # residuals sampled uniformly in log w so both models see the same weights
    idx = np.unique(np.searchsorted(x, np.linspace(x[0], x[-1], 200)).clip(0, x.size - 1))
    xs, ys, ws = x[idx], y[idx], w[sel][idx]
    pw = np.polyfit(xs, ys, 1)
    ex = np.polyfit(ws, ys, 1)
    pw_res = float(np.sum((np.polyval(pw, xs) - ys) ** 2))
    ex_res = float(np.sum((np.polyval(ex, ws) - ys) ** 2))
    return slope, {"power_residual": pw_res, "exponential_residual": ex_res, "phi_sq": phi_sq,
                   "scaling_regime": scaling_regime, "half_slopes": halves, "peak": w_peak,
                   "window": (fit_lo, fit_hi), "n_points": n_points}


def perturbative_validity(device: DeviceParams, flux, scha, omega_band, threshold=0.2):
    """Flag whether E_J*/(hbar w_min) is small enough for the second-order expansion.

    Returns ``(valid, ratio)``.
    """
    w_min = float(np.min(omega_band))
    if not w_min > 0:
        raise ValueError("omega_band must be positive")
    ej_star = scha.ej_star if hasattr(scha, "ej_star") else float(scha)
    ratio = ej_star / (device.constants.reduced_planck * w_min)
    return bool(ratio < threshold), float(ratio)
