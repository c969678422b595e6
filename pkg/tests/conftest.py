import warnings

import numpy as np
import pytest

from octlk.forward import quadrature_for, simulate_ascan
from octlk.model import LayeredSample, SystemParams

PHANTOM = ((1.5088, 174.0), (1.3225, 186.0), (1.5088, 173.0))


@pytest.fixture(autouse=True)
def _quiet_regime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture(scope="session")
def flat_params():
    """Reference instrument without sample tilt."""
    return SystemParams.reference_instrument(theta_omega=0.0)


@pytest.fixture(scope="session")
def tilted_params():
    return SystemParams.reference_instrument()


@pytest.fixture(scope="session")
def flat_quad(flat_params):
    return quadrature_for(flat_params)


@pytest.fixture(scope="session")
def phantom():
    return LayeredSample(PHANTOM)


@pytest.fixture(scope="session")
def phantom_spectrum(phantom, flat_params, flat_quad):
    return simulate_ascan(phantom, flat_params, flat_quad)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(pytestconfig):
    """Record one acceptance verdict; the summary lists them after the run."""
    log = pytestconfig.stash.setdefault(_CRITERIA, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        log.setdefault(number, []).append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_CRITERIA, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for number in sorted(log):
            for line in log[number]:
                terminalreporter.write_line(line)
