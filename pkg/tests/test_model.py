import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octlk.errors import DegenerateGeometryError, DomainError, RegimeWarning
from octlk.model import (
    AScanSpectrum,
    DepthProfile,
    LayeredSample,
    LayerLedger,
    SystemParams,
    derive_small_quantities,
    ledger_advance,
)


def test_reference_instrument_values(tilted_params):
    p = tilted_params
    assert p.k1 == pytest.approx(2 * math.pi / 1.31376)
    assert p.k2 == pytest.approx(2 * math.pi / 1.28286)
    assert p.a == pytest.approx(56.25)
    assert p.beam_width == pytest.approx(15.0)
    assert p.n_samples == 1498
    assert math.degrees(p.theta) == pytest.approx(2.08)
    assert math.degrees(p.theta_omega) == pytest.approx(1.2)
    assert p.k_grid().size == 1498


def test_small_quantities_frozen(tilted_params):
    # reference values computed once from the instrument constants
    expected = {
        "lk_sqrt_gamma": 0.015679045579951575,
        "lk_over_kbar": 0.011900085495759886,
        "kbar_a_over_psi0": 0.004603041698475354,
        "inv_lk_delta0": 0.0039,
        "theta_sq": 0.0013178968049652163,
        "theta_omega_sq": 0.0004386490844928603,
    }
    got = derive_small_quantities(tilted_params)
    for key, value in expected.items():
        assert got[key] == pytest.approx(value, rel=1e-9)


def test_small_quantities_warn_outside_regime(tilted_params):
    wide = tilted_params.with_(a=2500.0)
    with pytest.warns(RegimeWarning):
        derive_small_quantities(wide)


def test_small_quantities_reject_zero_offset(tilted_params):
    with pytest.raises(DegenerateGeometryError):
        derive_small_quantities(tilted_params.with_(delta0=0.0))


@pytest.mark.parametrize("change", [
    dict(k1=5.0, k2=4.0),
    dict(theta=0.2),
    dict(theta_omega=-0.01),
    dict(a=0.0),
    dict(n_samples=1),
])
def test_system_params_domain(tilted_params, change):
    with pytest.raises(DomainError):
        tilted_params.with_(**change)


def test_sample_indices_and_reflections():
    s = LayeredSample(((1.5, 10.0), (1.2, 20.0)))
    assert s.indices == (1.0, 1.5, 1.2, 1.0)
    assert s.n_interfaces == 3
    np.testing.assert_allclose(s.normal_reflections(), [-0.2, 0.3 / 2.7, 0.2 / 2.2])


@pytest.mark.parametrize("layers", [((0.9, 10.0),), ((1.5, 0.0),), ((1.5, 10.0), (1.5, 5.0))])
def test_sample_rejects_bad_layers(layers):
    with pytest.raises(DomainError):
        LayeredSample(layers)


def test_spectrum_validation():
    k = np.linspace(1, 2, 11)
    with pytest.raises(DomainError):
        AScanSpectrum(k, np.zeros(10))
    with pytest.raises(DomainError):
        AScanSpectrum(np.r_[k[:-1], 2.5], np.zeros(11))
    with pytest.raises(DomainError):
        AScanSpectrum(k, np.full(11, np.nan))
    assert AScanSpectrum(k, np.ones(11)).dk == pytest.approx(0.1)


def test_profile_needs_increasing_depths():
    with pytest.raises(DomainError):
        DepthProfile(np.array([0.0, 2.0, 1.0]), np.zeros(3))


def test_ledger_advance_oracle(tilted_params):
    led = ledger_advance(LayerLedger.start(tilted_params), 1.5088, 174.0)
    first, second = led.record(1), led.record(2)
    assert first.n == 1.5088
    assert second.delta - first.delta == pytest.approx(525.0624, abs=1e-9)
    assert second.psi0 - first.psi0 == pytest.approx(2 * 174 / 1.5088, abs=1e-9)
    assert second.transmission == pytest.approx(1 - (0.5088 / 2.5088) ** 2)
    assert second.xi == pytest.approx(0.5 * second.psi0 * math.sin(tilted_params.theta) ** 2)
    assert led.indices() == [1.0, 1.5088]
    assert led.widths() == [174.0]


def test_ledger_advance_rejects_bad_layers(tilted_params):
    led = LayerLedger.start(tilted_params)
    with pytest.raises(DomainError):
        ledger_advance(led, 1.3, 0.0)
    with pytest.raises(DomainError):
        ledger_advance(led, 0.8, 10.0)


layer_lists = st.lists(
    st.tuples(st.floats(1.0, 2.5), st.floats(1.0, 500.0)), min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(layers=layer_lists)
def test_ledger_accumulates_paths(layers):
    p = SystemParams.reference_instrument()
    led = LayerLedger.start(p)
    for n, d in layers:
        led = ledger_advance(led, n, d)
    deltas = [r.delta for r in led.records]
    assert deltas[-1] == pytest.approx(p.delta0 + sum(2 * n * d for n, d in layers), rel=1e-12)
    assert deltas == sorted(deltas)
    trans = [r.transmission for r in led.records]
    assert all(b <= a + 1e-15 for a, b in zip(trans, trans[1:]))
    assert all(0 < t <= 1 for t in trans)


@settings(max_examples=40, deadline=None)
@given(head=layer_lists, tail=layer_lists)
def test_ledger_split_runs_agree(head, tail):
    """Advancing in one run or two gives the same final record."""
    p = SystemParams.reference_instrument()
    one = LayerLedger.start(p)
    for n, d in head + tail:
        one = ledger_advance(one, n, d)
    two = LayerLedger.start(p)
    for n, d in head:
        two = ledger_advance(two, n, d)
    for n, d in tail:
        two = ledger_advance(two, n, d)
    a, b = one.current, two.current
    assert (a.delta, a.psi0, a.transmission) == pytest.approx((b.delta, b.psi0, b.transmission))
