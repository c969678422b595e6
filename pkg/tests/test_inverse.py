import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octlk.errors import DomainError, GridMismatchError, NoLayerError, NoSignalError
from octlk.forward import normal_reflection, simulate_ascan, stack_contribution
from octlk.inverse import (
    InterfaceModel,
    ReconstructOptions,
    StepBuilder,
    StepData,
    calibrate_q0,
    functional_full,
    functional_of_r,
    functional_simplified,
    lambda_ratio_distinct,
    prepare_step,
    quartic_coefficients,
    reconstruct,
    scan_functionals,
    sign_determination,
    solve_index_deeper,
    solve_index_first,
    width_search,
)
from octlk.model import AScanSpectrum, LayeredSample, LayerLedger, ledger_advance
from octlk.specfft import band_limited_transform, transform_matrix


def _second_step(params, quad, n1, n2, d1, offset=3.3):
    """Exact data for interface 2 under a known first layer."""
    k = params.k_grid()
    led = ledger_advance(LayerLedger.start(params), n1, d1)
    z = led.current.delta + offset + np.linspace(-170, 170, 401)
    T = transform_matrix(k, z)
    model = InterfaceModel(params, [1.0, n1], [], 2, quad)
    lam = T @ stack_contribution([1.0, n1, n2], [d1], 1, k, params, quad)
    g = T @ model.spectrum(d1)
    y = np.abs(lam + normal_reflection(n1, n2) * g) ** 2
    return StepData(j=2, z=z, y=y, Lambda=lam, gamma_star=g, ledger=led, d=d1,
                    model=model, transform=T)


@pytest.fixture(scope="module")
def step2(flat_params, flat_quad):
    return _second_step(flat_params, flat_quad, 1.5088, 1.3225, 174.0)


@pytest.fixture(scope="module")
def first_builder(flat_params, flat_quad, phantom_spectrum):
    return prepare_step(phantom_spectrum, flat_params, 1, quad=flat_quad)


@settings(max_examples=60, deadline=None)
@given(r=st.floats(-0.9, 0.9))
def test_quartic_matches_misfit(step2, r):
    val = functional_of_r(step2, r)
    poly = float(np.polyval(quartic_coefficients(step2), r))
    assert poly == pytest.approx(val, rel=1e-10, abs=1e-10 * float(np.sum(step2.y**2)))


@settings(max_examples=60, deadline=None)
@given(n=st.floats(1.0, 2.5))
def test_index_coefficient_bijection(step2, n):
    if abs(n - step2.n_prev) < 1e-6:
        return
    assert step2.index_for(step2.r_dagger(n)) == pytest.approx(n, rel=1e-12)


def test_simplified_misfit_uses_normal_coefficient(step2):
    n = 1.4
    assert functional_simplified(step2, n) == pytest.approx(
        functional_of_r(step2, step2.r_dagger(n)), rel=1e-12)
    with pytest.raises(DomainError):
        functional_full(step2, 0.9)
    with pytest.raises(DomainError):
        functional_full(step2, step2.n_prev)


def test_deeper_index_recovered(step2):
    sol = solve_index_deeper(step2)
    assert sol.n == pytest.approx(1.3225, abs=1e-9)
    assert sol.distinct
    assert lambda_ratio_distinct(step2)
    assert sol.value <= 1e-12 * float(np.sum(step2.y**2))


def test_step_data_validation(step2):
    with pytest.raises(DomainError):
        StepData(j=2, z=step2.z, y=step2.y[:-1], Lambda=step2.Lambda,
                 gamma_star=step2.gamma_star, ledger=step2.ledger)
    with pytest.raises(DomainError):
        StepData(j=2, z=step2.z, y=-step2.y, Lambda=step2.Lambda,
                 gamma_star=step2.gamma_star, ledger=step2.ledger)


def test_constant_lambda_ratio_is_flagged(step2):
    flat = StepData(j=2, z=step2.z, y=step2.y, Lambda=0.3 * step2.gamma_star,
                    gamma_star=step2.gamma_star, ledger=step2.ledger)
    assert not lambda_ratio_distinct(flat)


def test_first_index_and_calibration(first_builder):
    step = first_builder()
    # full-model data sit within the simplification error of the exact index
    assert solve_index_first(step) == pytest.approx(1.5088, abs=1e-2)
    r = normal_reflection(1.0, 1.5088)
    exact = StepData(j=1, z=step.z, y=3.7 * np.abs(r * step.gamma_star) ** 2,
                     Lambda=step.Lambda, gamma_star=step.gamma_star, ledger=step.ledger)
    q0 = calibrate_q0(exact, 1.5088)
    assert q0 == pytest.approx(3.7, rel=1e-12)
    assert solve_index_first(exact, q0=q0) == pytest.approx(1.5088, rel=1e-12)


def test_width_search_finds_layer(flat_params, flat_quad, phantom, phantom_spectrum):
    k = flat_params.k_grid()
    led = LayerLedger.start(flat_params)
    model = InterfaceModel(flat_params, phantom.indices[:2], [], 2, flat_quad)
    prior = stack_contribution(phantom.indices, phantom.widths, 1, k, flat_params, flat_quad)
    z = ledger_advance(led, 1.5088, 174.0).current.delta + 3.3 + np.linspace(-120, 120, 301)
    r = normal_reflection(1.5088, 1.3225)
    probe = StepBuilder(model, z, phantom_spectrum.values, prior, led)
    y = np.abs(probe.Lambda + r * probe.gamma_star(174.0)) ** 2
    builder = StepBuilder(model, z, phantom_spectrum.values, prior, led, y=y)
    found = width_search(builder, (165.0, 183.0), 0.1, r)
    assert found.d == pytest.approx(174.0, abs=1e-3)
    assert found.grid.size == found.values.size == 181
    # on the simulated spectrum the simplified model is off by a fraction of a micron
    rough = width_search(StepBuilder(model, z, phantom_spectrum.values, prior, led),
                         (165.0, 183.0), 0.1, r)
    assert rough.d == pytest.approx(174.0, abs=1.0)
    with pytest.raises(DomainError):
        width_search(builder, (10.0, 5.0))


def test_sign_from_phase(phantom, flat_params, phantom_spectrum):
    led = LayerLedger.start(flat_params)
    for n, d in phantom.layers:
        led = ledger_advance(led, n, d)
    prof = band_limited_transform(phantom_spectrum)
    got = [sign_determination(prof, rec.delta, flat_params.k_bar) for rec in led.records]
    assert got == [int(np.sign(r)) for r in phantom.normal_reflections()]


def test_reconstruct_phantom(phantom_spectrum, flat_params, flat_quad):
    res = reconstruct(phantom_spectrum, flat_params, quad=flat_quad)
    assert res.complete
    np.testing.assert_allclose(res.indices, [1.5088, 1.3225, 1.5088, 1.0], atol=5e-3)
    np.testing.assert_allclose(res.widths, [174.0, 186.0, 173.0], atol=0.5)
    assert res.signs == [-1, 1, -1, 1]


def test_reconstruct_noisy_single_layer(flat_params, flat_quad, rng):
    sample = LayeredSample(((1.42, 160.0),))
    spec = simulate_ascan(sample, flat_params, flat_quad)
    noisy = spec.values * (1 + 0.05 * rng.uniform(-1, 1, spec.values.size))
    res = reconstruct(AScanSpectrum(spec.k_grid, noisy), flat_params, quad=flat_quad)
    assert res.indices[0] == pytest.approx(1.42, abs=0.02)
    assert res.widths[0] == pytest.approx(160.0, abs=0.5)


def test_reconstruct_rejects_bad_input(flat_params, flat_quad):
    k = flat_params.k_grid()
    with pytest.raises(NoSignalError):
        reconstruct(AScanSpectrum(k, np.zeros_like(k)), flat_params, quad=flat_quad)
    other = np.linspace(k[0], k[-1], k.size - 2)
    with pytest.raises(GridMismatchError):
        reconstruct(AScanSpectrum(other, np.cos(other * 4000.0)), flat_params, quad=flat_quad)


def test_prepare_step_bounds(phantom_spectrum, flat_params, flat_quad):
    with pytest.raises(NoLayerError):
        prepare_step(phantom_spectrum, flat_params, 9, quad=flat_quad)


def test_scan_functionals_shapes(step2, flat_params, flat_quad, phantom_spectrum):
    k = flat_params.k_grid()
    prior = stack_contribution([1.0, 1.5088], [], 1, k, flat_params, flat_quad)
    builder = StepBuilder(step2.model, step2.z, phantom_spectrum.values, prior, step2.ledger)
    ns = np.linspace(1.2, 1.45, 6)
    full, simp = scan_functionals(builder, ns, [173.5, 174.0])
    assert full.shape == simp.shape == (2, 6)
    step = builder(174.0)
    assert simp[1, 2] == pytest.approx(functional_simplified(step, ns[2]), rel=1e-10)
    assert full[1, 2] == pytest.approx(functional_full(step, ns[2]), rel=1e-10)


def test_options_default_window():
    opts = ReconstructOptions()
    assert opts.M % 2 == 1 and opts.M_width % 2 == 1
    assert math.isclose(opts.d_resolution, 0.1)
