import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsg import circuit, losses, scha
from oracles import HBAR, E

REFERENCE = circuit.reference_device()
FLUX_QUANTUM = 2 * np.pi * HBAR / (2 * E)
MEASURED_SCALE_HZ = 100e6  # order of the observed boundary damping
MEASURED_FLOOR_HZ = 10e6  # lower end of the same range


@pytest.fixture(scope="module")
def scha44():
    return scha.scha_solve(REFERENCE, 0.44)


def _diel(tan_ref=3.4e-4, b=0.5):
    return losses.DielectricModel.for_array(REFERENCE.array, tan_ref, b)


# chain dielectric

def test_zero_loss_tangent_gives_no_damping():
    w = 2 * np.pi * np.array([2e9, 5e9])
    for fn in (losses.gamma_diel, losses.gamma_diel_kappa, losses.gamma_diel_closed):
        np.testing.assert_array_equal(fn(_diel(0.0), w), 0.0)


def test_dielectric_model_reading():
    m = _diel()
    a = REFERENCE.array
    assert m.tan_delta(2 * np.pi * 1e9) == pytest.approx(3.4e-4, rel=1e-14)
    # x = w / w_p with the screening length and velocity taken from the dispersion relation
    w = 2 * np.pi * 5e9
    assert m.x(w) == pytest.approx(w * np.sqrt(a.inductance * a.capacitance), rel=1e-12)


def test_wavenumber_route_matches_closed_form():
    m = _diel()
    w = 2 * np.pi * np.linspace(0.5e9, 8e9, 40)
    np.testing.assert_allclose(losses.gamma_diel_kappa(m, w), losses.gamma_diel_closed(m, w), rtol=1e-10)


def test_first_order_wavenumber_matches_full_root():
    m = _diel()
    w = 2 * np.pi * np.linspace(0.5e9, 8e9, 20)
    k = losses.kappa(m, w)
    exact = losses.kappa_exact(m, w)
    np.testing.assert_allclose(k.kappa_prime, exact.real, rtol=1e-6)
    # the imaginary part is first order in tan(delta); next order is tan(delta)^2 smaller
    np.testing.assert_allclose(k.kappa_double, exact.imag, rtol=10 * m.tan_delta(w).max())
    assert np.all(k.quality_factor > 100)


def test_long_wavelength_form_is_the_small_x_limit():
    m = _diel()
    w = 2 * np.pi * np.array([0.1e9, 0.5e9, 1e9])
    x = m.x(w)
    rel = losses.gamma_diel_closed(m, w) / losses.gamma_diel(m, w) - 1
    np.testing.assert_allclose(rel, x ** 2 / (1 - x ** 2), rtol=1e-10)


def test_reference_evaluation_at_five_gigahertz():
    w = 2 * np.pi * 5e9
    a = REFERENCE.array
    x = w * np.sqrt(a.inductance * a.capacitance)
    td = 3.4e-4 * np.sqrt(5.0)
    assert losses.gamma_diel(_diel(), w) == pytest.approx(5e9 * x ** 2 * td, rel=1e-12)


def test_dielectric_damping_scales_with_power_three_and_a_half():
    m = _diel()
    w = 2 * np.pi * np.array([0.2e9, 0.4e9])
    g = losses.gamma_diel(m, w)
    assert g[1] / g[0] == pytest.approx(2 ** 3.5, rel=1e-12)


def test_validity_regime_is_enforced():
    with pytest.raises(ValueError):
        losses.gamma_diel(_diel(), 2 * np.pi * 12e9)
    with pytest.raises(ValueError):
        losses.gamma_diel(_diel(0.2), 2 * np.pi * 1e9)


def test_dielectric_model_rejects_bad_input():
    with pytest.raises(ValueError):
        losses.DielectricModel(-1.0, 0.5, 31.0, 1e12)
    with pytest.raises(ValueError):
        losses.DielectricModel(1e-5, 0.5, 0.0, 1e12)


@settings(max_examples=50, deadline=None)
@given(f=st.floats(0.1e9, 8e9), tan_ref=st.floats(0, 1e-2), b=st.floats(0, 1))
def test_chain_damping_is_non_negative(f, tan_ref, b):
    m = _diel(tan_ref, b)
    w = 2 * np.pi * f
    assert losses.gamma_diel_closed(m, w) >= 0
    assert losses.gamma_diel_kappa(m, w) >= 0


# boundary junction

def test_lossless_dielectric_shunt_is_an_open():
    m = losses.JunctionLossModel("dielectric", 3e-9, 14.5e-15, tan_delta=0.0)
    assert np.isinf(losses.r_junction(m, 2 * np.pi * 4e9))


def test_quasiparticle_resistance_formula(scha44):
    w = 2 * np.pi * 4e9
    gap = 210e-6 * E
    m = losses.JunctionLossModel("quasiparticle", scha44.lj_star, 14.5e-15, x_qp=1e-3, gap=gap)
    expected = np.pi * w * scha44.lj_star / 1e-3 * np.sqrt(2 * gap / (HBAR * w))
    assert losses.r_junction(m, w) == pytest.approx(expected, rel=1e-12)


def test_quasiparticle_resistance_scaling():
    m1 = losses.JunctionLossModel("quasiparticle", 3e-9, 14.5e-15, x_qp=1e-3)
    m2 = losses.JunctionLossModel("quasiparticle", 6e-9, 14.5e-15, x_qp=1e-3)
    w = 2 * np.pi * 4e9
    assert losses.r_junction(m1, 4 * w) / losses.r_junction(m1, w) == pytest.approx(2.0, rel=1e-12)
    assert losses.r_junction(m2, w) / losses.r_junction(m1, w) == pytest.approx(2.0, rel=1e-12)


def test_junction_model_validation():
    with pytest.raises(ValueError):
        losses.JunctionLossModel("magic", 3e-9, 1e-15)
    with pytest.raises(ValueError):
        losses.JunctionLossModel("quasiparticle", 3e-9, 1e-15, x_qp=1.0)
    with pytest.raises(ValueError):
        losses.JunctionLossModel("quasiparticle", 3e-9, 1e-15, gap=0.0)
    with pytest.raises(ValueError):
        losses.r_junction(losses.JunctionLossModel("dielectric", 3e-9, 1e-15, tan_delta=1e-3), 0.0)


def test_lossless_boundary_reflects_perfectly(scha44):
    w = 2 * np.pi * np.linspace(2e9, 9e9, 50)
    y = 1j / (w * scha44.lj_star) - 1j * w * REFERENCE.squid.capacitance
    np.testing.assert_allclose(losses.gamma_boundary(REFERENCE, y, w), 0.0, atol=1e-6)


def test_matched_boundary_is_rejected():
    a = REFERENCE.array
    w = 2 * np.pi * 3e9
    z_t = a.characteristic_impedance / np.sqrt(1 - w ** 2 * a.inductance * a.capacitance)
    with pytest.raises(circuit.PoleError):
        losses.gamma_boundary(REFERENCE, 1 / z_t, w)


def test_weak_boundary_loss_is_a_lorentzian_about_the_junction_resonance(scha44):
    a = REFERENCE.array
    cj = REFERENCE.squid.capacitance
    m = losses.JunctionLossModel("dielectric", scha44.lj_star, cj, tan_delta=1e-5)
    wj = scha44.omega_j_star
    w = np.linspace(0.3 * wj, 1.5 * wj, 4001)
    g = losses.gamma_boundary(REFERENCE, losses.junction_admittance(m, w), w)
    # weak-loss expansion: 2 Zt G / (1 + (Zt B)^2) per round trip
    z_t = a.characteristic_impedance / np.sqrt(1 - w ** 2 * a.inductance * a.capacitance)
    b = 1 / (w * scha44.lj_star) - w * cj
    lorentz = 2 * z_t * (w * cj * 1e-5) / (1 + (z_t * b) ** 2)
    np.testing.assert_allclose(g, circuit.fsr_hz(a, w) / np.pi * lorentz, rtol=1e-4)
    # the resonant factor itself is centred on the renormalized junction frequency
    peak = w[np.argmax(1 / (1 + (z_t * b) ** 2))]
    assert abs(peak - wj) <= w[1] - w[0]
    # the damping maximum sits well inside the resonance half-width
    half_width = 1 / (2 * z_t[np.argmin(np.abs(w - wj))] * cj)
    assert abs(w[np.argmax(g)] - wj) < 0.25 * half_width


@settings(max_examples=40, deadline=None)
@given(f=st.floats(1e9, 12e9), td=st.floats(0, 0.1), xqp=st.floats(0, 0.01))
def test_boundary_damping_is_non_negative(f, td, xqp):
    w = 2 * np.pi * f
    for m in (losses.JunctionLossModel("dielectric", 3e-9, 14.5e-15, tan_delta=td),
              losses.JunctionLossModel("quasiparticle", 3e-9, 14.5e-15, x_qp=xqp)):
        assert losses.gamma_boundary(REFERENCE, losses.junction_admittance(m, w), w) >= 0


# flux noise

def test_flux_noise_vanishes_without_noise(scha44):
    w = 2 * np.pi * np.linspace(3e9, 8e9, 10)
    out = losses.flux_noise_broadening(REFERENCE, scha44, 0.44, w, losses.FluxNoiseModel(0.0))
    np.testing.assert_array_equal(out, 0.0)


def test_flux_noise_vanishes_at_zero_flux():
    sol = scha.scha_solve(REFERENCE, 0.0)
    w = 2 * np.pi * np.linspace(3e9, 8e9, 10)
    out = losses.flux_noise_broadening(REFERENCE, sol, 0.0, w, losses.FluxNoiseModel(1e-6 * FLUX_QUANTUM))
    np.testing.assert_allclose(out, 0.0, atol=1e-30)


def test_flux_noise_is_even_in_flux():
    noise = losses.FluxNoiseModel(1e-6 * FLUX_QUANTUM)
    w = 2 * np.pi * np.linspace(3e9, 8e9, 10)
    for fl in (0.2, 0.44):
        plus = losses.flux_noise_broadening(REFERENCE, scha.scha_solve(REFERENCE, fl), fl, w, noise)
        minus = losses.flux_noise_broadening(REFERENCE, scha.scha_solve(REFERENCE, -fl), -fl, w, noise)
        np.testing.assert_allclose(plus, minus, rtol=1e-9)


def test_boundary_derivative_matches_finite_difference(scha44):
    w = 2 * np.pi * np.array([3e9, 5e9, 7e9])
    lj = scha44.lj_star
    h = 1e-6 * lj
    fd = (scha.phase_shift_theta(REFERENCE, lj + h, w) - scha.phase_shift_theta(REFERENCE, lj - h, w)) / (2 * h)
    np.testing.assert_allclose(np.abs(losses.dtheta_dlj(REFERENCE, lj, w)), np.abs(fd), rtol=1e-5)


def test_flux_noise_band_integral():
    noise = losses.FluxNoiseModel(1e-6 * FLUX_QUANTUM)
    assert noise.rms_flux() == noise.amplitude
    expected = noise.amplitude * np.sqrt(2 * np.log(1e9))
    assert noise.rms_flux(absorb_log=False) == pytest.approx(expected, rel=1e-12)


def test_flux_noise_model_validation():
    with pytest.raises(ValueError):
        losses.FluxNoiseModel(-1.0)
    with pytest.raises(ValueError):
        losses.FluxNoiseModel(1.0, exponent=1.5)
    with pytest.raises(ValueError):
        losses.FluxNoiseModel(1.0, f_lo=10.0, f_hi=1.0)


def test_scaling_correction_reduces_the_estimate(scha44):
    noise = losses.FluxNoiseModel(1e-6 * FLUX_QUANTUM)
    w = 2 * np.pi * np.array([4e9, 6e9])
    base = losses.flux_noise_broadening(REFERENCE, scha44, 0.44, w, noise)
    corr = losses.flux_noise_broadening(REFERENCE, scha44, 0.44, w, noise, scaling_correction=True)
    np.testing.assert_allclose(corr / base, np.sqrt(2) * scha44.ratio, rtol=1e-12)


# exclusion of conventional mechanisms

def _boundary_peak(sol, model):
    w = np.linspace(0.3 * sol.omega_j_star, 1.5 * sol.omega_j_star, 20001)
    return losses.gamma_boundary(REFERENCE, losses.junction_admittance(model, w), w).max()


def test_boundary_dielectric_loss_is_an_order_of_magnitude_too_small(scha44):
    m = losses.JunctionLossModel("dielectric", scha44.lj_star, REFERENCE.squid.capacitance, tan_delta=5e-2)
    assert MEASURED_SCALE_HZ / _boundary_peak(scha44, m) >= 10


def test_quasiparticle_loss_is_two_orders_of_magnitude_too_small(scha44):
    m = losses.JunctionLossModel("quasiparticle", scha44.lj_star, REFERENCE.squid.capacitance, x_qp=1e-3)
    assert MEASURED_SCALE_HZ / _boundary_peak(scha44, m) >= 100


@pytest.mark.parametrize("flux", [0.35, 0.44, 0.48, 0.5])
def test_flux_noise_is_two_orders_of_magnitude_too_small(flux):
    sol = scha.scha_solve(REFERENCE, flux)
    noise = losses.FluxNoiseModel(1e-6 * FLUX_QUANTUM)
    w = 2 * np.pi * np.linspace(2.5e9, 11e9, 2001)
    broadening = losses.flux_noise_broadening(REFERENCE, sol, flux, w, noise)
    assert MEASURED_FLOOR_HZ / broadening.max() >= 100
