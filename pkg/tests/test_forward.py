import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octlk.errors import DomainError, TotalInternalReflectionError
from octlk.forward import (
    AngularQuadrature,
    acceptance_disk,
    asymptotic_magnitude,
    closed_form_first_interface,
    fresnel_reflection,
    interface_contribution,
    normal_reflection,
    phase_factor,
    simplified_interface_contribution,
    simulate_ascan,
    snell_chain,
    stack_contribution,
    transmission_product,
)
from octlk.model import LayeredSample, LayerLedger, ledger_advance
from octlk.specfft import transform_at

indices = st.floats(1.0, 2.5)


@settings(max_examples=100, deadline=None)
@given(n=indices, m=indices)
def test_fresnel_normal_incidence(n, m):
    assert fresnel_reflection(n, m, 1.0) == pytest.approx(normal_reflection(n, m), abs=1e-15)
    assert abs(normal_reflection(n, m)) < 1


@settings(max_examples=100, deadline=None)
@given(n=indices, m=indices, angle=st.floats(0.0, 0.1))
def test_fresnel_quadratic_departure(n, m, angle):
    """Departure from the normal value is bounded by a multiple of angle squared."""
    if m < n and n * math.sin(angle) > m:
        return
    r = fresnel_reflection(n, m, math.cos(angle))
    bound = 2.0 * (n / m) ** 2 * angle**2 + 1e-15
    assert abs(r - normal_reflection(n, m)) <= bound


def test_total_internal_reflection_raises():
    with pytest.raises(TotalInternalReflectionError):
        fresnel_reflection(1.5, 1.0, math.cos(math.radians(60)))


def test_transmission_product():
    assert transmission_product([]) == 1.0
    assert transmission_product([0.2, -0.1]) == pytest.approx(0.96 * 0.99)


@settings(max_examples=50, deadline=None)
@given(layers=st.lists(st.tuples(indices, st.floats(1.0, 300.0)), min_size=1, max_size=4),
       s=st.floats(0.0, 0.03))
def test_snell_invariant(layers, s):
    sample = LayeredSample(tuple(layers), check_contrast=False)
    kt = np.array([[math.sqrt(s), 0.0]])
    angles = snell_chain(sample, kt, sample.n_interfaces)
    inv = [float(n * np.sin(a).item()) for n, a in zip(sample.indices, angles)]
    # angles come from cosines close to one, so absolute precision is about sqrt(eps)
    np.testing.assert_allclose(inv, inv[0], rtol=1e-9, atol=5e-8)


def test_phase_factor_small_angle():
    sample = LayeredSample(((1.5088, 174.0),))
    for s in (1e-4, 4e-4, 1.3e-3):
        kt = np.array([[math.sqrt(s), 0.0]])
        psi = phase_factor(sample, kt, 2)[0]
        approx = 2 * 1.5088 * 174 - (1 / 1.5088) * s * 174
        assert abs(psi - approx) < 5 * 174 * s**2


def test_acceptance_disk_geometry(tilted_params):
    k = tilted_params.k_bar
    disk = acceptance_disk(k, tilted_params)
    assert disk.radius == pytest.approx(k * math.sin(tilted_params.theta))
    assert disk.contains(np.array(disk.center))
    far = np.array(disk.center) + np.array([1.2 * disk.radius, 0.0])
    assert not disk.contains(far)


@pytest.mark.parametrize("tilt", [0.0, math.radians(1.2)])
def test_quadrature_weights(tilt):
    quad = AngularQuadrature.build(math.radians(2.08), tilt, 16, 16)
    assert np.all(quad.weights > 0)
    # every node direction lies inside the accepted cap
    disk = acceptance_disk(1.0, type("P", (), {"theta": math.radians(2.08),
                                               "theta_omega": tilt})())
    assert np.all(disk.contains(quad.kt))


def test_closed_form_first_interface(flat_params, flat_quad):
    k = flat_params.k_grid()
    sample = LayeredSample(((1.3, 50.0),))
    r = normal_reflection(1.0, 1.3)
    exact = np.real(closed_form_first_interface(flat_params, r, k))
    numeric = simplified_interface_contribution(sample, flat_params, 1, k, quad=flat_quad)
    assert np.max(np.abs(exact - numeric)) <= 1e-6 * np.max(np.abs(exact))


def test_closed_form_needs_zero_tilt(tilted_params):
    with pytest.raises(DomainError):
        closed_form_first_interface(tilted_params, -0.2, tilted_params.k_grid())


def test_simplified_close_to_full(phantom, flat_params, flat_quad):
    k = flat_params.k_grid()
    for j in range(1, 5):
        full = interface_contribution(phantom, flat_params, j, k, flat_quad)
        simp = simplified_interface_contribution(phantom, flat_params, j, k, quad=flat_quad)
        assert np.max(np.abs(full - simp)) < 1e-2 * np.max(np.abs(full))


def test_unit_mode_scales_with_coefficient(phantom, flat_params, flat_quad):
    k = flat_params.k_grid()
    unit = stack_contribution(phantom.indices, phantom.widths, 2, k, flat_params, flat_quad,
                              mode="unit")
    simp = simplified_interface_contribution(phantom, flat_params, 2, k, quad=flat_quad)
    np.testing.assert_allclose(simp, normal_reflection(1.5088, 1.3225) * unit)
    with pytest.raises(ValueError):
        stack_contribution(phantom.indices, phantom.widths, 2, k, flat_params, flat_quad,
                           mode="other")


def test_simulate_is_sum_of_interfaces(phantom, flat_params, flat_quad, phantom_spectrum):
    k = flat_params.k_grid()
    parts = sum(interface_contribution(phantom, flat_params, j, k, flat_quad)
                for j in range(1, 5))
    np.testing.assert_allclose(phantom_spectrum.values, parts, rtol=1e-12, atol=0)
    empty = simulate_ascan(LayeredSample(()), flat_params)
    assert not np.any(empty.values)
    with pytest.raises(NotImplementedError):
        simulate_ascan(phantom, flat_params, flat_quad, order=2)


def test_interface_out_of_range(phantom, flat_params):
    with pytest.raises(DomainError):
        interface_contribution(phantom, flat_params, 5, flat_params.k_grid())


@pytest.mark.parametrize("j", [1, 2, 3])
def test_asymptotic_magnitude_matches_transform(phantom, flat_params, flat_quad, j):
    led = LayerLedger.start(flat_params)
    for n, d in phantom.layers:
        led = ledger_advance(led, n, d)
    k = flat_params.k_grid()
    z = led.record(j).delta + np.linspace(-60, 60, 601)
    numeric = np.abs(transform_at(interface_contribution(phantom, flat_params, j, k, flat_quad),
                                  k, z)) ** 2
    approx = asymptotic_magnitude(led, flat_params, j, z)
    assert approx.max() == pytest.approx(numeric.max(), rel=0.02)
    assert np.max(np.abs(approx / approx.max() - numeric / numeric.max())) < 0.02
