import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsg import circuit
from oracles import nodal_impedance_matrix

REFERENCE = circuit.reference_device()


@pytest.mark.parametrize("n", [1, 2, 3, 5, 12])
def test_impedance_matrix_matches_nodal_inversion(n):
    rng = np.random.default_rng(n)
    array = circuit.ArrayParams(n, 0.54e-9, 144e-15, 0.15e-15, 0.05)
    w = 2 * np.pi * rng.uniform(0.1e9, 40e9, 30)
    z = circuit.impedance_matrix(array, w)
    for k, wk in enumerate(w):
        ref = nodal_impedance_matrix(n, 0.54e-9, 144e-15, 0.15e-15, wk, 0.05)
        np.testing.assert_allclose(z[k], ref, rtol=1e-8)


def test_impedance_matrix_is_reciprocal():
    w = 2 * np.pi * np.linspace(1e9, 15e9, 7)
    z = circuit.impedance_matrix(circuit.ArrayParams(50, 0.54e-9, 144e-15, 0.15e-15, 0.01), w)
    np.testing.assert_array_equal(z[:, 0, 1], z[:, 1, 0])


def test_semi_infinite_impedance_is_self_similar():
    # adding one more cell in front of a semi-infinite ladder leaves its input impedance unchanged
    a = REFERENCE.array
    w = 2 * np.pi * np.array([1e9, 5e9, 12e9, 17e9])
    z_inf = circuit.z_infinity(a, w)
    y_s = 1 / (-1j * w * a.inductance) - 1j * w * a.capacitance
    y_g = -1j * w * a.ground_capacitance
    rebuilt = 1 / (y_g + 1 / (1 / y_s + z_inf))
    np.testing.assert_allclose(rebuilt, z_inf, rtol=1e-10)


def test_semi_infinite_impedance_is_passive_below_plasma_edge():
    w = 2 * np.pi * np.linspace(0.5e9, 17.5e9, 300)
    assert np.all(circuit.z_infinity(REFERENCE.array, w).real > 0)


def test_long_lossy_array_approaches_semi_infinite_limit():
    # a million cells with light loss: the far end is invisible, the loss barely perturbs Z
    a = circuit.ArrayParams(10 ** 6, 0.54e-9, 144e-15, 0.15e-15, 0.5)
    w = 2 * np.pi * np.array([4e9, 8e9])
    z_a, _ = circuit.array_impedances(a, w)
    lossless = circuit.ArrayParams(10 ** 6, 0.54e-9, 144e-15, 0.15e-15)
    assert np.allclose(z_a, circuit.z_infinity(lossless, w), rtol=0.02)


def test_dispersion_round_trip():
    k = np.linspace(0.01, 3.1, 50)
    w = circuit.dispersion_omega(REFERENCE.array, k)
    np.testing.assert_allclose(circuit.dispersion_k(REFERENCE.array, w).real, k, rtol=1e-10)


def test_dispersion_saturates_at_plasma_frequency():
    w_pi = circuit.dispersion_omega(REFERENCE.array, np.pi)
    assert w_pi == pytest.approx(REFERENCE.array.plasma_frequency, rel=1e-12)


def test_group_velocity_matches_finite_difference():
    k = np.array([0.05, 0.5, 1.5, 2.5])
    h = 1e-4
    om = lambda x: circuit.dispersion_omega(REFERENCE.array, x)  # noqa: E731
    # fourth-order stencil: the band bends sharply at small k
    fd = (8 * (om(k + h) - om(k - h)) - (om(k + 2 * h) - om(k - 2 * h))) / (12 * h)
    np.testing.assert_allclose(circuit.group_velocity(REFERENCE.array, k), fd, rtol=1e-6)


def test_low_frequency_free_spectral_range():
    fsr = circuit.fsr_hz(REFERENCE.array, 2 * np.pi * 1e6)
    assert fsr == pytest.approx(0.41e9, rel=0.05)


def test_flux_dependence_of_squid_energy():
    s = REFERENCE.squid
    assert circuit.ej_of_flux(s, 0.0) == pytest.approx(s.ej_zero)
    assert circuit.ej_of_flux(s, 0.5) == pytest.approx(s.asymmetry * s.ej_zero)
    assert circuit.ej_of_flux(s, 0.3) == pytest.approx(circuit.ej_of_flux(s, -0.3))


def test_inductance_energy_round_trip():
    e = circuit.ghz_energy(3.3)
    assert circuit.energy_from_inductance(circuit.inductance_from_energy(e)) == pytest.approx(e, rel=1e-14)
    assert np.isinf(circuit.inductance_from_energy(0.0))


def test_engineering_convention_round_trip():
    z = np.array([3 + 4j, -1j, 2.0])
    np.testing.assert_array_equal(circuit.from_engineering(circuit.to_engineering(z)), z)
    # an inductor is -i w L here and +j w L in the engineering convention
    assert circuit.to_engineering(-1j * 5.0) == 5.0j


def test_open_weak_link_reduces_to_array_end_impedance():
    w = 2 * np.pi * np.array([2.1e9, 3.3e9])
    dev = circuit.reference_device(n_junctions=200, loss_floor=1.0)
    z_a, _ = circuit.array_impedances(dev.array, w)
    np.testing.assert_allclose(circuit.z_aw(dev, np.inf, w), z_a)


def test_transmission_is_passive():
    dev = circuit.reference_device(n_junctions=300, loss_floor=0.5)
    w = 2 * np.pi * np.linspace(1e9, 12e9, 5000)
    s = circuit.s21(dev, circuit.z_weak_linear(dev.squid, 1.5e-9, w), w, check_poles=False)
    assert np.all(np.abs(s) <= 1 + 1e-12)


def test_transmission_far_from_modes_is_near_unity():
    # with the array disconnected (infinite node impedance) the line is matched
    dev = circuit.reference_device(n_junctions=10)
    z_n = circuit.node_impedance(dev, np.inf)
    assert 2 * z_n / dev.feedline_impedance == pytest.approx(1.0)


def test_pole_is_reported_with_nearest_mode():
    a = circuit.ArrayParams(20, 0.54e-9, 144e-15, 0.15e-15)
    l = 3
    w = circuit.dispersion_omega(a, l * np.pi / 21)
    with pytest.raises(circuit.PoleError) as info:
        circuit.array_impedances(a, np.array([w]))
    assert info.value.nearest == pytest.approx(w, rel=1e-9)


def test_invalid_parameters_are_rejected():
    with pytest.raises(ValueError):
        circuit.ArrayParams(0, 1e-9, 1e-15, 1e-16)
    with pytest.raises(ValueError):
        circuit.ArrayParams(10, -1e-9, 1e-15, 1e-16)
    with pytest.raises(ValueError):
        circuit.SquidParams(1e-24, 1.2, 1e-15)
    with pytest.raises(ValueError):
        circuit.dispersion_omega(REFERENCE.array, 4.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), f=st.floats(0.2e9, 30e9), r=st.floats(0.0, 5.0),
       cg=st.floats(0.05e-15, 2e-15))
def test_nodal_equivalence_for_random_ladders(n, f, r, cg):
    a = circuit.ArrayParams(n, 0.54e-9, 144e-15, cg, r)
    w = 2 * np.pi * f
    try:
        z = circuit.impedance_matrix(a, np.array([w]))[0]
    except circuit.PoleError:
        return
    ref = nodal_impedance_matrix(n, 0.54e-9, 144e-15, cg, w, r)
    np.testing.assert_allclose(z, ref, rtol=1e-7, atol=1e-9 * np.abs(ref).max())


@settings(max_examples=40, deadline=None)
@given(f=st.floats(0.3e9, 17e9), r=st.floats(1e-3, 10.0), n=st.integers(5, 500))
def test_lossy_environment_is_passive(f, r, n):
    dev = circuit.reference_device(n_junctions=n, loss_floor=r)
    z = circuit.z_env(dev, np.array([2 * np.pi * f]))
    assert z[0].real >= -1e-12 * abs(z[0])
