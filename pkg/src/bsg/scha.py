"""Self-consistent harmonic approximation for the boundary junction.

Phase fluctuations are evaluated on the imaginary frequency axis.  For a
passive network the T=0 integral

    <phi^2> = (2/R_Q) int_0^inf dw Re Z0(w) / w

can be rotated onto w = i nu, where Z0(i nu) is real, positive and smooth:

    <phi^2> = (2/R_Q) int_0^inf dnu Z0(i nu) / nu.

This removes the need to resolve the sharp Fabry-Perot peaks of Re Z0 on the
real axis and also captures undamped (zero-width) modes exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from . import circuit
from .circuit import DeviceParams, PoleError

log = logging.getLogger(__name__)


class QuadratureError(RuntimeError):
    pass


@dataclass
class FluctuationResult:
    phi_sq: float
    quadrature_error: float


@dataclass
class SchaSolution:
    flux: float
    ej: float
    ej_star: float
    lj_star: float
    omega_j_star: float
    zj_star: float
    phi_sq: float
    iterations: int
    converged: bool
    residual: float = 0.0

    @property
    def ratio(self):
        return self.ej_star / self.ej if self.ej > 0 else 1.0


def phi2_ohmic(z_over_rq, zj_over_z):
    """Zero-point phase fluctuations of an LC junction shunted by a resistor Z.

    Parameters
    ----------
    z_over_rq : float
        Z / R_Q of the ohmic shunt.
    zj_over_z : float
        Ratio Z_J / Z of the junction impedance sqrt(L/C) to the shunt.
    """
    if not (z_over_rq > 0 and zj_over_z > 0):
        raise ValueError("arguments must be > 0")
    r2 = (1.0 / zj_over_z) ** 2

    def f(xi):
        return 1.0 / (xi + r2 * (xi - 1) ** 2)

    # the integrand peaks near xi=1 with width ~ 1/r; split there
    width = min(1.0, zj_over_z)
    pts = [max(0.0, 1 - 20 * width), 1.0, 1 + 20 * width]
    total, err = 0.0, 0.0
    edges = [0.0] + [p for p in pts if p > 0] + [None]
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi is None:
            v, e = integrate.quad(f, lo, np.inf, epsabs=0, epsrel=1e-12, limit=400)
        else:
            v, e = integrate.quad(f, lo, hi, points=[1.0] if lo < 1 < hi else None,
                                  epsabs=0, epsrel=1e-12, limit=400)
        total += v
        err += e
    if err > 1e-8 * max(total, 1.0):
        raise QuadratureError(f"quadrature reached only {err:.2e}")
    return z_over_rq * total


def device_environment(device: DeviceParams) -> Callable:
    """Z_env at imaginary frequency i*nu for the array plus feed-line."""
    load = device.feedline_impedance / 2

    def env(nu):
        return np.real(circuit.z_env(device, 1j * np.asarray(nu, dtype=float), load=load,
                                     check_poles=False))
    return env


def ohmic_environment(resistance) -> Callable:
    return lambda nu: np.full(np.shape(nu), float(resistance))


def fluctuations_imaginary_axis(env: Callable, cj, lj_star, r_q, nu_span=(1e-2, 1e18)):
    """<phi^2> for the linearized junction (C_J || L_J*) shunted by ``env``.

    ``env(nu)`` must return the (real) environment impedance at w = i nu.
    """
    if not lj_star > 0:
        raise ValueError("lj_star must be > 0")
    if np.isinf(lj_star):
        raise ValueError("open junction: phase fluctuations diverge in an ohmic environment")

    def z0(nu):
        y = nu * cj + 1.0 / (nu * lj_star) + 1.0 / env(nu)
        return 1.0 / y

    # natural scale of the junction
    nu0 = 1.0 / np.sqrt(lj_star * cj) if cj > 0 else 1.0 / (lj_star * 1e-15)
    lo, hi = np.log(nu_span[0]), np.log(nu_span[1])
    # breakpoints on a log grid help quad find the features
    centre = np.log(nu0)
    brk = np.clip(centre + np.array([-12.0, -6.0, -3.0, 0.0, 3.0, 6.0]), lo, hi)
    edges = np.unique(np.concatenate([[lo], brk, [hi]]))
    total, err = 0.0, 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        v, e = integrate.quad(lambda u: z0(np.exp(u)), a, b, epsabs=1e-10 * r_q,
                              epsrel=1e-11, limit=400)
        total += v
        err += e
    # Z0 ~ nu L at the bottom and ~ 1/(nu C) at the top: both tails integrate
    # to the end value of the integrand in log variable
    tail = z0(np.exp(lo)) + z0(np.exp(hi))
    total += tail
    phi_sq = 2.0 * total / r_q
    q_err = 2.0 * err / r_q
    if q_err > 1e-6 * max(phi_sq, 1.0):
        raise QuadratureError(f"fluctuation integral error {q_err:.2e}")
    return FluctuationResult(float(phi_sq), float(q_err))


def phase_fluctuations(device: DeviceParams, lj_star, env: Callable | None = None) -> FluctuationResult:
    """T=0 phase fluctuations of the boundary node for a linearized weak link."""
    env = env or device_environment(device)
    return fluctuations_imaginary_axis(env, device.squid.capacitance, lj_star,
                                       device.constants.resistance_quantum)


def _solution(device, flux, ej, ej_star, phi_sq, it, ok, res):
    c = device.constants
    cj = device.squid.capacitance
    lj = float(circuit.inductance_from_energy(ej_star, c)) if ej_star > 0 else np.inf
    wj = 1.0 / np.sqrt(cj * lj) if np.isfinite(lj) and cj > 0 else 0.0
    zj = np.sqrt(lj / cj) if cj > 0 else np.inf
    return SchaSolution(float(flux), float(ej), float(ej_star), lj, float(wj), float(zj),
                        float(phi_sq), it, ok, float(res))


def scha_solve(device: DeviceParams, flux=0.0, tol=1e-6, max_iter=200, mixing=0.5,
               env: Callable | None = None, ej=None) -> SchaSolution:
    """Damped fixed point E* <- (1-eta) E* + eta E_J exp(-<phi^2>[E*]/2).

    Non-convergence is returned as a flagged solution, not raised.  ``ej``
    overrides the flux-dependent SQUID energy.
    """
    if not 0 < tol <= 1e-2:
        raise ValueError("tol must lie in (0, 1e-2]")
    env = env or device_environment(device)
    c = device.constants
    if ej is None:
        ej = float(circuit.ej_of_flux(device.squid, flux))
    if ej <= 0:
        return _solution(device, flux, 0.0, 0.0, np.inf, 0, True, 0.0)

    def target(e_star):
        lj = float(circuit.inductance_from_energy(e_star, c))
        fl = fluctuations_imaginary_axis(env, device.squid.capacitance, lj, c.resistance_quantum)
        return ej * np.exp(-fl.phi_sq / 2), fl.phi_sq

    eta = mixing
    e_star = ej
    prev_step = 0.0
    phi_sq = 0.0
    res = np.inf
    floor = ej * 1e-12
    for it in range(1, max_iter + 1):
        new, phi_sq = target(e_star)
        step = new - e_star
        res = abs(step) / max(e_star, floor)
        if res < tol:
            return _solution(device, flux, ej, new, phi_sq, it, True, res)
        if prev_step * step < 0:
            eta *= 0.5
        prev_step = step
        e_star = max(e_star + eta * step, floor)
        if e_star <= floor * 1.0000001 or eta < 1e-6:
            break
    log.info("SCHA did not converge at flux %.4f (residual %.2e)", flux, res)
    return _solution(device, flux, ej, e_star, phi_sq, it, False, res)


def scaling_law(ej, ec, alpha):
    """Power-law estimate of the renormalized Josephson energy in an ohmic bath."""
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    ej = np.asarray(ej, dtype=float)
    bracket = (2 * np.pi * alpha) ** 2 * ej / (2 * ec)
    with np.errstate(divide="ignore"):
        est = ej * bracket ** (alpha / (1 - alpha))
    return np.minimum(ej, est)


def _tan_half_k(device: DeviceParams, omega):
    a = device.array
    w = np.asarray(omega, dtype=float)
    if np.any((w <= 0) | (w >= a.plasma_frequency)):
        raise ValueError("omega must lie in (0, omega_p)")
    return w * np.sqrt(a.ground_capacitance * a.inductance) / (2 * np.sqrt(1 - (w / a.plasma_frequency) ** 2))


def cot_theta(device: DeviceParams, lj_star, omega, cj=None):
    """cot(theta) of the boundary phase shift for C_J || L_J* termination."""
    a = device.array
    w = np.asarray(omega, dtype=float)
    cj = device.squid.capacitance if cj is None else cj
    q = _tan_half_k(device, w)
    cell = 1 - w ** 2 * a.inductance * a.capacitance
    lj = np.asarray(lj_star, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inf_branch = -2 * cell / (w ** 2 * a.inductance * cj) if cj > 0 else -np.inf * np.ones_like(w)
        finite = (2 * lj / a.inductance) * cell / (1 - w ** 2 * lj * cj)
        term = np.where(np.isinf(lj), inf_branch, finite)
        return q * (1 - term)


def phase_shift_theta(device: DeviceParams, lj_star, omega, cj=None):
    """Boundary phase shift theta in [0, pi)."""
    ct = cot_theta(device, lj_star, omega, cj)
    return np.mod(np.arctan2(1.0, ct), np.pi)


def relative_phase_shift(device: DeviceParams, flux, omega, scha: SchaSolution | None = None,
                         reference_lj=np.inf):
    """delta theta = theta(L_J*(flux)) - theta(reference), wrapped into [0, pi).

    ``reference_lj`` is the half-flux inductance; infinite by default, or pass
    the SCHA value at flux 1/2 for the asymmetry-corrected variant.
    """
    if scha is None:
        scha = scha_solve(device, flux)
    lj = scha.lj_star
    d = phase_shift_theta(device, lj, omega) - phase_shift_theta(device, reference_lj, omega)
    d = np.mod(d, np.pi)
    return np.where(np.isclose(d, np.pi, rtol=0, atol=1e-12), 0.0, d)


def mode_frequencies(device: DeviceParams, lj_star, f_min, f_max, cj=None, samples_per_fsr=40):
    """Mode frequencies (Hz) from (N+1/2) k + theta = pi (l + 1/2).

    Returns (l, f) arrays.  Mode index l counts from the lowest mode of the
    open (theta = 0) array.
    """
    a = device.array
    n = a.n_junctions
    wmax = min(2 * np.pi * f_max, a.plasma_frequency * (1 - 1e-9))
    wmin = 2 * np.pi * f_min
    fsr = circuit.fsr_hz(a, np.array([wmin, wmax])) * 2 * np.pi
    npts = int(samples_per_fsr * (wmax - wmin) / fsr.min()) + 8
    w = np.linspace(wmin, wmax, npts)

    def psi(x):
        k = np.real(circuit.dispersion_k(a, x))
        return (n + 0.5) * k + phase_shift_theta(device, lj_star, x, cj)

    def g(x):
        return np.cos(psi(x))

    gv = g(w)
    roots = []
    for i in np.nonzero(np.sign(gv[:-1]) * np.sign(gv[1:]) < 0)[0]:
        r = optimize.brentq(g, w[i], w[i + 1], xtol=1e-14 * w[i], rtol=1e-14)
        # discard sign flips caused by the theta wrap at pi (cos jumps but no zero)
        if abs(g(r)) < 1e-6:
            roots.append(r)
    roots = np.array(roots)
    k = np.real(circuit.dispersion_k(a, roots)) if len(roots) else roots
    ell = np.ceil((n + 0.5) * k / np.pi - 0.5 - 1e-9).astype(int)
    return ell, roots / (2 * np.pi)
