import numpy as np
import pytest

from ionshuttle.filter_chain import default_chain, discretize
from ionshuttle.trajectory import generate_trajectory
from ionshuttle.trap_model import make_toy_trap

PITCH = 280e-6
DT = 80e-9

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy_model():
    return make_toy_trap()


@pytest.fixture(scope="session")
def plan():
    return generate_trajectory(PITCH, 12.8e-6, DT, start=(4 * PITCH, 0.0, 0.0))


@pytest.fixture(scope="session")
def spec():
    return discretize(default_chain(), DT)


@pytest.fixture(scope="session")
def ramp(toy_model, plan, spec):
    from ionshuttle.waveform_synth import synthesize
    return synthesize(toy_model, plan, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
