"""Transmission synthesis, resonance finding and hanging-resonator line-shape fits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import optimize, signal

from . import circuit, losses
from .circuit import DeviceParams, PoleError

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass
class Trace:
    frequencies: np.ndarray
    s21: np.ndarray
    flux: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.s21 = np.asarray(self.s21, dtype=complex)
        if self.frequencies.shape != self.s21.shape or self.frequencies.ndim != 1:
            raise ValueError("frequencies and s21 must be 1-d arrays of equal length")
        if np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequency axis must be strictly increasing")


@dataclass(frozen=True)
class LinearModel:
    """Linearized weak link C_J || L_J*."""

    lj_star: float


@dataclass(frozen=True)
class SelfEnergyModel:
    """Weak link described by a retarded self-energy; ``real_only`` drops Im Sigma."""

    sigma: object
    real_only: bool = False


@dataclass
class Window:
    center: float
    lo: float
    hi: float
    width: float
    depth: float


@dataclass
class ResonanceFit:
    f_l: float
    q_internal: float
    q_external: float
    asymmetry: float
    residual_rms: float
    covariance: np.ndarray
    inverse_qi: float = 0.0
    inverse_qi_std: float = 0.0
    success: bool = True
    message: str = ""

    @property
    def gamma_int(self) -> float:
        """f_l / Q_i in Hz."""
        return self.f_l * self.inverse_qi

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


@dataclass
class ModeRow:
    flux: float
    l: int
    f_l: float
    fsr: float = np.nan
    delta_theta: float = np.nan
    gamma_int: float = np.nan
    gamma_int_err: float = np.nan
    gamma_diel: float = 0.0
    gamma_j: float = np.nan
    flagged: bool = False


@dataclass
class ModeTable:
    rows: list

    COLUMNS = ("flux", "l", "f_l", "fsr", "delta_theta", "gamma_int", "gamma_int_err",
               "gamma_diel", "gamma_j", "flagged")

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def as_dicts(self):
        return [asdict(r) for r in self.rows]


# ---------------------------------------------------------------------------
# synthesis


def weak_link_impedance(device: DeviceParams, model, omega):
    w = np.asarray(omega, dtype=float)
    if isinstance(model, LinearModel):
        return circuit.z_weak_linear(device.squid, model.lj_star, w)
    if isinstance(model, SelfEnergyModel):
        from .selfenergy import weak_link_impedance as zw
        s = model.sigma.at(w)
        if model.real_only:
            s = s.real + 0j
        return zw(s, device.squid.capacitance, w, device.constants)
    raise TypeError(f"unsupported weak-link model {type(model).__name__}")


def _s21_safe(device, model, omega):
    """S21 with grid points sitting on an exact pole nudged by a relative 1e-12."""
    w = np.array(omega, dtype=float)
    for _ in range(8):
        try:
            return circuit.s21(device, weak_link_impedance(device, model, w), w)
        except PoleError:
            # move only points that are numerically singular
            bad = np.zeros(w.shape, bool)
            for i, wi in enumerate(w):
                try:
                    circuit.s21(device, weak_link_impedance(device, model, np.array([wi])), np.array([wi]))
                except PoleError:
                    bad[i] = True
            w = np.where(bad, w * (1 + 1e-12), w)
    raise PoleError("could not step off a pole")


def synth_trace(device: DeviceParams, model, flux, f_min, f_max, n_points, noise_level=0.0,
                seed=None) -> Trace:
    """Sample S21 on a uniform grid, with optional complex Gaussian noise of std ``noise_level``."""
    if not 0 < f_min < f_max:
        raise ValueError("need 0 < f_min < f_max")
    f = np.linspace(f_min, f_max, int(n_points))
    s = _s21_safe(device, model, 2 * np.pi * f)
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        s = s + noise_level * (rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape)) / np.sqrt(2)
    meta = {"model": type(model).__name__, "noise": noise_level, "seed": seed}
    return Trace(f, s, float(flux), meta)


def lineshape(f, f_l, inv_qi, inv_qe, x):
    """Hanging-resonator transmission with impedance asymmetry x = X/Z_tl.

    Written in inverse quality factors so that the lossless limit is regular.
    """
    d = (np.asarray(f) - f_l) / f_l
    a = 1 - 1j * x
    return a * (inv_qi - 2j * d) / (inv_qi + inv_qe * a - 2j * d)


# ---------------------------------------------------------------------------
# resonance finding


def find_resonances(trace: Trace, prominence=0.05, linewidths=10, fsr=None):
    """Dips of |S21| with fit windows of +-``linewidths`` FWHM estimates.

    Windows are capped at a third of the local mode spacing (or of ``fsr`` in Hz).
    """
    depth = 1 - np.abs(trace.s21)
    if depth.size < 3 or np.ptp(depth) < prominence:
        return []
    idx, props = signal.find_peaks(depth, prominence=prominence)
    if len(idx) == 0:
        return []
    widths, *_ = signal.peak_widths(depth, idx, rel_height=0.5)
    df = trace.frequencies[1] - trace.frequencies[0]
    f = trace.frequencies
    centers = f[idx]
    out = []
    for j, i in enumerate(idx):
        w_hz = max(widths[j] * df, 2 * df)
        half = linewidths * w_hz
        if fsr is not None:
            spacing = fsr
        elif len(centers) > 1:
            nb = np.abs(np.delete(centers, j) - centers[j])
            spacing = nb.min()
        else:
            spacing = np.inf
        half = min(half, spacing / 3)
        lo, hi = max(f[0], centers[j] - half), min(f[-1], centers[j] + half)
        out.append(Window(float(centers[j]), float(lo), float(hi), float(w_hz), float(depth[i])))
    return out


# ---------------------------------------------------------------------------
# line-shape fit


def _initial_guess(f, s21):
    mag = np.abs(s21)
    i = int(np.argmin(mag))
    f0 = f[i]
    depth = 1 - mag ** 2
    half = depth[i] / 2
    above = np.nonzero(depth >= half)[0]
    fwhm = max(f[above[-1]] - f[above[0]], f[1] - f[0]) if len(above) else 10 * (f[1] - f[0])
    q_tot = fwhm / f0
    rmin = min(mag[i], 0.99)
    return np.array([f0, q_tot * rmin, q_tot * (1 - rmin), 0.0])


def fit_lineshape(trace: Trace, window: Window | None = None, initial_guess=None, seed=0,
                  restarts=3, residual_threshold=0.05) -> ResonanceFit:
    """Complex least-squares fit of :func:`lineshape` inside ``window``.

    Parameters are scaled to order unity around the initial guess; the best of
    ``restarts`` jittered starts (seeded) is kept.  The covariance is
    sigma^2 (J^T J)^-1 with sigma^2 from the residual.
    """
    f, s = trace.frequencies, trace.s21
    if window is not None:
        sel = (f >= window.lo) & (f <= window.hi)
        f, s = f[sel], s[sel]
    if len(f) < 8:
        raise FitError("fewer than 8 points in the fit window")
    p0 = np.asarray(initial_guess, dtype=float) if initial_guess is not None else _initial_guess(f, s)
    f0 = p0[0]
    q_scale = max(p0[1] + p0[2], 1e-12)
    scale = np.array([f0 * q_scale, q_scale, q_scale, 1.0])

    def unpack(u):
        return f0 + u[0] * scale[0], u[1] * scale[1], u[2] * scale[2], u[3]

    def resid(u):
        r = lineshape(f, *unpack(u)) - s
        return np.concatenate([r.real, r.imag])

    def jac_u(u):
        f_l, iqi, iqe, x = unpack(u)
        a = 1 - 1j * x
        num = iqi - 2j * (f - f_l) / f_l
        den2 = (num + iqe * a) ** 2
        cols = np.stack([2j * a * a * iqe * f / (f_l ** 2 * den2) * scale[0],
                         a * a * iqe / den2 * scale[1],
                         -a * a * num / den2 * scale[2],
                         -1j * num * num / den2], axis=1)
        return np.concatenate([cols.real, cols.imag])

    rng = np.random.default_rng(seed)
    u0 = np.array([0.0, p0[1] / q_scale, p0[2] / q_scale, p0[3]])
    best = None
    for k in range(max(1, restarts)):
        start = u0 if k == 0 else u0 * (1 + 0.2 * rng.standard_normal(4)) + np.array([0.05, 0, 0, 0.01]) * rng.standard_normal(4)
        try:
            res = optimize.least_squares(resid, start, jac=jac_u, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                         max_nfev=4000)
        except ValueError:
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise FitError("optimizer failed on every start")
    f_l, iqi, iqe, x = unpack(best.x)
    n_res = 2 * len(f)
    dof = max(n_res - 4, 1)
    sigma2 = 2 * best.cost / dof
    jac = best.jac / scale  # d r / d p in physical units
    try:
        cov = sigma2 * np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.full((4, 4), np.nan)
    rms = float(np.sqrt(2 * best.cost / n_res))
    ok = bool(best.success) and iqe > 0 and f[0] <= f_l <= f[-1] and rms < residual_threshold
    qi = 1.0 / iqi if iqi > 0 else np.inf
    msg = "" if ok else f"fit rejected (rms {rms:.3g}, status {best.status})"
    return ResonanceFit(float(f_l), float(qi), float(1.0 / iqe) if iqe > 0 else np.inf, float(x), rms,
                        cov, float(iqi), float(np.sqrt(max(cov[1, 1], 0))), ok, msg)


def fit_trace(trace: Trace, prominence=0.05, seed=0, fsr=None):
    """Locate and fit every resonance in ``trace``; failed fits are kept, flagged."""
    out = []
    for k, win in enumerate(find_resonances(trace, prominence, fsr=fsr)):
        try:
            out.append(fit_lineshape(trace, win, seed=seed + k))
        except FitError as err:
            out.append(ResonanceFit(win.center, np.nan, np.nan, np.nan, np.inf, np.full((4, 4), np.nan),
                                    np.nan, np.nan, False, str(err)))
    return out


# ---------------------------------------------------------------------------
# mode tables


def fsr_from_modes(freqs):
    """Local spacing of adjacent modes (Hz), centred differences inside."""
    f = np.sort(np.asarray(freqs, dtype=float))
    if len(f) < 2:
        return np.full(len(f), np.nan)
    d = np.diff(f)
    out = np.empty(len(f))
    out[0], out[-1] = d[0], d[-1]
    out[1:-1] = 0.5 * (d[:-1] + d[1:])
    return out


def mode_table(fits, flux, labels=None, min_f=None) -> ModeTable:
    good = [ft for ft in fits if ft.success]
    good.sort(key=lambda r: r.f_l)
    freqs = np.array([g.f_l for g in good])
    fsr = fsr_from_modes(freqs)
    rows = []
    for i, g in enumerate(good):
        lab = int(labels[i]) if labels is not None else i
        rows.append(ModeRow(float(flux), lab, g.f_l, float(fsr[i]), gamma_int=g.gamma_int,
                            gamma_int_err=g.f_l * g.inverse_qi_std))
    return ModeTable(rows)


def extract_phase_shift(table: ModeTable, reference: ModeTable, use_labels=False, tolerance=0.45):
    """delta theta_l = pi (f_l - f_l^ref) / FSR_l^ref for each mode of ``table``.

    Modes are paired with the reference (half-flux) modes either by label or
    by the nearest reference mode at or below them (shifts are bounded by one
    FSR).  Rows whose shift exceeds ``tolerance`` FSR with nearest-neighbour
    pairing are flagged as ambiguous; shifts of a full FSR give pi, flagged.
    """
    ref_f = reference.column("f_l")
    ref_fsr = fsr_from_modes(ref_f)
    order = np.argsort(ref_f)
    ref_f, ref_fsr = ref_f[order], ref_fsr[order]
    ref_l = reference.column("l")[order]
    rows = []
    for r in table.rows:
        if use_labels:
            hit = np.nonzero(ref_l == r.l)[0]
            if len(hit) == 0:
                rows.append(replace_row(r, delta_theta=np.nan, flagged=True))
                continue
            j = hit[0]
        else:
            j = int(np.argmin(np.abs(ref_f - r.f_l)))
        shift = r.f_l - ref_f[j]
        frac = shift / ref_fsr[j]
        flag = r.flagged
        if not use_labels and abs(frac) > tolerance:
            flag = True
        if np.isclose(abs(frac), 1.0, atol=1e-9) or abs(frac) > 1:
            flag = True
        dtheta = np.pi * frac
        rows.append(replace_row(r, delta_theta=float(dtheta), fsr=float(ref_fsr[j]), flagged=bool(flag)))
    return ModeTable(rows)


def replace_row(row: ModeRow, **kw) -> ModeRow:
    d = asdict(row)
    d.update(kw)
    return ModeRow(**d)


def gamma_decomposition(table: ModeTable, dielectric=None, noise_sigmas=2.0) -> ModeTable:
    """gamma_J = gamma_int - gamma_diel per row.

    ``dielectric`` is a :class:`losses.DielectricModel`, a callable f -> Hz,
    or ``None`` for no background.  Rows where gamma_J is negative beyond
    ``noise_sigmas`` fit errors are flagged.
    """
    rows = []
    for r in table.rows:
        if dielectric is None:
            gd = 0.0
        elif isinstance(dielectric, losses.DielectricModel):
            gd = float(losses.gamma_diel(dielectric, 2 * np.pi * r.f_l, check=False))
        else:
            gd = float(dielectric(r.f_l))
        gj = r.gamma_int - gd
        err = r.gamma_int_err if np.isfinite(r.gamma_int_err) else 0.0
        flag = r.flagged or (gj < -noise_sigmas * err)
        rows.append(replace_row(r, gamma_diel=gd, gamma_j=gj, flagged=bool(flag)))
    return ModeTable(rows)


def decay_probability(table: ModeTable):
    """Round-trip absorption probability gamma_J / FSR per row."""
    return table.column("gamma_j") / table.column("fsr")


# ---------------------------------------------------------------------------
# dispersion calibration


@dataclass
class DispersionFit:
    inductance: float
    ground_capacitance: float
    covariance: np.ndarray
    plasma_frequency: float
    characteristic_impedance: float
    degenerate: bool
    condition: float


def _mode_omega(log_l, log_cg, capacitance, n, ell):
    arr = circuit.ArrayParams(n, float(np.exp(log_l)), capacitance, float(np.exp(log_cg)))
    k = np.pi * (np.asarray(ell) + 0.5) / (n + 0.5)
    return circuit.dispersion_omega(arr, k)


def fit_dispersion(modes, capacitance, n_junctions, initial=(0.5e-9, 0.2e-15), min_band_fraction=0.3,
                   degeneracy_condition=1e3) -> DispersionFit:
    """Least-squares (L, C_g) from (l, f_l) pairs with C held fixed.

    ``degenerate`` is set when the top mode lies below ``min_band_fraction``
    of the fitted plasma frequency or when the scaled normal matrix is
    ill-conditioned: only the product L C_g is then constrained.
    """
    modes = np.asarray(modes, dtype=float)
    if modes.ndim != 2 or modes.shape[1] != 2 or len(modes) < 3:
        raise ValueError("need at least three (l, f) pairs")
    ell, f = modes[:, 0], modes[:, 1]
    w = 2 * np.pi * f

    def resid(p):
        return np.log(_mode_omega(p[0], p[1], capacitance, n_junctions, ell)) - np.log(w)

    res = optimize.least_squares(resid, np.log(np.asarray(initial)), method="lm",
                                 xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    lval, cg = np.exp(res.x)
    jac = res.jac
    sv = np.linalg.svd(jac, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    dof = max(len(f) - 2, 1)
    s2 = max(2 * res.cost / dof, 1e-30)
    try:
        cov_log = s2 * np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov_log = np.full((2, 2), np.inf)
    jac_phys = np.diag([lval, cg])
    cov = jac_phys @ cov_log @ jac_phys
    arr = circuit.ArrayParams(n_junctions, lval, capacitance, cg)
    top = w.max() / arr.plasma_frequency
    degenerate = bool(cond > degeneracy_condition or top < min_band_fraction)
    return DispersionFit(float(lval), float(cg), cov, arr.plasma_frequency, arr.characteristic_impedance,
                         degenerate, cond)


# ---------------------------------------------------------------------------
# self-energy damping pipeline


def adaptive_frequencies(device: DeviceParams, f_min, f_max, points_per_fsr=4000):
    """Uniform axis fine enough to resolve loss-floor limited dips."""
    fsr = float(circuit.fsr_hz(device.array, 2 * np.pi * f_max))
    n = int(points_per_fsr * (f_max - f_min) / fsr) + 1
    return n


def damping_from_sigma(device: DeviceParams, sigma, flux, f_min, f_max, points_per_fsr=4000,
                       prominence=0.02, seed=0):
    """gamma_J per mode from fits of the full and the Re-Sigma-only transmission.

    Returns a :class:`ModeTable` whose ``gamma_diel`` column carries the
    reference (Re Sigma only) internal width and ``gamma_j`` the difference.
    """
    n = adaptive_frequencies(device, f_min, f_max, points_per_fsr)
    full = synth_trace(device, SelfEnergyModel(sigma), flux, f_min, f_max, n)
    ref = synth_trace(device, SelfEnergyModel(sigma, real_only=True), flux, f_min, f_max, n)
    fits_ref = fit_trace(ref, prominence, seed)
    rows = []
    ref_good = [r for r in fits_ref if r.success]
    ref_f = np.array([r.f_l for r in ref_good])
    fsr = fsr_from_modes(ref_f)
    # both traces are refitted in one window per mode so that the slow
    # background of the neighbouring modes biases them identically
    for i, r in enumerate(ref_good):
        half = fsr[i] / 3 if np.isfinite(fsr[i]) else 10 * r.f_l * (r.inverse_qi + 1 / r.q_external)
        win = Window(r.f_l, r.f_l - half, r.f_l + half, 0.0, 0.0)
        try:
            fr = fit_lineshape(ref, win, seed=seed + i)
            ft = fit_lineshape(full, win, seed=seed + i)
        except FitError:
            fr = ft = None
        if ft is None or not (ft.success and fr.success):
            rows.append(ModeRow(float(flux), i, r.f_l, float(fsr[i]), gamma_diel=r.gamma_int, flagged=True))
            continue
        rows.append(ModeRow(float(flux), i, ft.f_l, float(fsr[i]), gamma_int=ft.gamma_int,
                            gamma_int_err=ft.f_l * ft.inverse_qi_std, gamma_diel=fr.gamma_int,
                            gamma_j=ft.gamma_int - fr.gamma_int))
    return ModeTable(rows)
