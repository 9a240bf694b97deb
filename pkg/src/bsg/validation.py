"""Fast invariant suite behind ``bsg validate``.

Every check builds its own small inputs, so the suite runs in well under a
minute on a single core and exercises each numerical module once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import circuit, losses, scha
from . import selfenergy as se
from . import spectroscopy as sp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _nodal_impedances(array: circuit.ArrayParams, omega):
    """End and transfer impedance by direct inversion of the nodal admittance matrix."""
    n = array.n_junctions + 1
    out = []
    for w in np.atleast_1d(omega):
        y_s = 1 / (-1j * w * array.inductance + array.series_resistance) - 1j * w * array.capacitance
        y_g = -1j * w * array.ground_capacitance
        y = np.diag(np.full(n, y_g, dtype=complex))
        for j in range(n - 1):
            y[j, j] += y_s
            y[j + 1, j + 1] += y_s
            y[j, j + 1] -= y_s
            y[j + 1, j] -= y_s
        z = np.linalg.inv(y)
        out.append((z[0, 0], z[0, -1]))
    return np.array(out)


def check_ladder_vs_nodal():
    array = circuit.ArrayParams(7, 0.54e-9, 144e-15, 0.15e-15, 0.2)
    w = 2 * np.pi * np.array([1.3e9, 6.1e9, 14.7e9, 30e9])
    z_a, z_ab = circuit.array_impedances(array, w)
    ref = _nodal_impedances(array, w)
    err = max(np.max(np.abs(z_a / ref[:, 0] - 1)), np.max(np.abs(z_ab / ref[:, 1] - 1)))
    return err < 1e-9, f"max relative deviation {err:.1e}"


def check_passivity():
    device = circuit.reference_device(n_junctions=600, loss_floor=1e-3)
    w = 2 * np.pi * np.linspace(0.5e9, 20e9, 4001)
    z = circuit.z_env(device, w, check_poles=False)
    s = circuit.s21(device, circuit.z_weak_linear(device.squid, 2e-9, w), w, check_poles=False)
    ok = bool(np.all(z.real >= -1e-9 * np.abs(z)) and np.all(np.abs(s) <= 1 + 1e-12))
    return ok, f"min Re Z_env {z.real.min():.2e} Ohm, max |S21| {np.abs(s).max():.12f}"


def check_derived_consistency():
    device = circuit.reference_device()
    sol = scha.scha_solve(device, 0.3)
    c = device.constants
    cj = device.squid.capacitance
    wj_a = 1 / np.sqrt(cj * sol.lj_star)
    wj_b = np.sqrt(sol.ej_star * (2 * c.electron_charge) ** 2 / cj) / c.reduced_planck
    zj_b = c.resistance_quantum / (2 * np.pi) * np.sqrt(4 * c.electron_charge ** 2 / (cj * sol.ej_star))
    err = max(abs(wj_a / wj_b - 1), abs(sol.zj_star / zj_b - 1), abs(sol.omega_j_star / wj_a - 1))
    return err < 1e-12, f"max relative deviation {err:.1e}"


def check_ohmic_fluctuations():
    c = circuit.CONSTANTS
    r, cj, lj = 300.0, 10e-15, 3e-9
    num = scha.fluctuations_imaginary_axis(scha.ohmic_environment(r), cj, lj, c.resistance_quantum).phi_sq
    ref = scha.phi2_ohmic(r / c.resistance_quantum, np.sqrt(lj / cj) / r)
    err = abs(num / ref - 1)
    return err < 1e-6, f"imaginary-axis {num:.8f} vs closed form {ref:.8f}"


def check_phase_shift_bounds():
    device = circuit.reference_device()
    sol = scha.scha_solve(device, 0.35)
    w = 2 * np.pi * np.linspace(2e9, 0.95 * sol.omega_j_star / (2 * np.pi), 400)
    d = scha.relative_phase_shift(device, 0.35, w, scha=sol)
    approach = w >= 0.6 * sol.omega_j_star
    rising = bool(np.all(np.diff(d[approach]) > 0))
    ok = bool(np.all((d >= 0) & (d < np.pi))) and rising
    return ok, f"delta theta in [{d.min():.3f}, {d.max():.3f}] rad, rising toward omega_J*={rising}"


def _small_solve(temperature):
    device = circuit.reference_device(n_junctions=400, loss_floor=1e-4 * 1897.0)
    grid = se.FrequencyGrid.for_device(device, n_points=2 ** 15)
    opts = se.SolverOptions(cutoff_fraction=0.5)
    return device, grid, se.dyson_solve(device, 0.45, temperature, grid, opts)


def check_keldysh_invariants():
    device, grid, (gf, sig) = _small_solve(0.03)
    band = (0.1 * device.array.plasma_frequency, 0.8 * device.array.plasma_frequency)
    kk = se.kramers_kronig_residual(grid, sig.sigma, band)
    ok = sig.converged and sig.fdt_residual < 1e-8 and kk < 1e-2
    return ok, f"converged={sig.converged} FDT {sig.fdt_residual:.1e} KK {kk:.1e}"


def check_zero_temperature_limit():
    _, grid, (_, s0) = _small_solve(0.0)
    _, _, (_, sk) = _small_solve(1e-6)
    pos = grid.positive
    err = np.max(np.abs(s0.retarded[pos] - sk.sigma[pos])) / np.max(np.abs(s0.retarded[pos]))
    return err < 1e-3, f"time-ordered vs Keldysh relative deviation {err:.1e}"


def check_fit_roundtrip(seed=0):
    truth = np.array([5.1e9, 1 / 2000, 1 / 900, 0.05])
    f = np.linspace(5.1e9 - 40e6, 5.1e9 + 40e6, 4001)
    tr = sp.Trace(f, sp.lineshape(f, *truth), 0.0)
    fits = sp.fit_trace(tr, seed=seed)
    if len(fits) != 1 or not fits[0].success:
        return False, f"expected one successful fit, got {len(fits)}"
    ft = fits[0]
    got = np.array([ft.f_l, ft.inverse_qi, 1 / ft.q_external, ft.asymmetry])
    err = float(np.max(np.abs(got - truth) / np.abs(truth)))
    return err < 1e-6, f"max relative parameter error {err:.1e}"


def check_dielectric_identity():
    array = circuit.reference_device().array
    model = losses.DielectricModel.for_array(array, 3.4e-4)
    w = 2 * np.pi * np.linspace(1e9, 15e9, 50)
    a = losses.gamma_diel_kappa(model, w)
    b = losses.gamma_diel_closed(model, w)
    err = float(np.max(np.abs(a / b - 1)))
    return err < 1e-10, f"wavenumber route vs closed form {err:.1e}"


CHECKS = {
    "ladder-vs-nodal-analysis": check_ladder_vs_nodal,
    "passivity": check_passivity,
    "derived-quantity-consistency": check_derived_consistency,
    "ohmic-fluctuation-integral": check_ohmic_fluctuations,
    "phase-shift-bounds": check_phase_shift_bounds,
    "keldysh-fdt-and-causality": check_keldysh_invariants,
    "zero-temperature-limit": check_zero_temperature_limit,
    "lineshape-fit-roundtrip": check_fit_roundtrip,
    "dielectric-identity": check_dielectric_identity,
}


def run_suite(seed=0, names=None):
    results = []
    for name, fn in CHECKS.items():
        if names is not None and name not in names:
            continue
        try:
            ok, detail = fn(seed) if name == "lineshape-fit-roundtrip" else fn()
        except Exception as err:  # a crashing check is a failed check
            ok, detail = False, f"{type(err).__name__}: {err}"
        log.info("%s: %s (%s)", name, "pass" if ok else "FAIL", detail)
        results.append(CheckResult(name, bool(ok), detail))
    return results
