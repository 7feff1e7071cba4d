import numpy as np
import pytest

from memxbar.backend import DirectBackend
from memxbar.device import VariabilitySpec, new_crossbar


@pytest.fixture
def ideal_model():
    """Noise-free, unquantized crossbar with every threshold at 0.06 V."""
    return new_crossbar(8, 8, VariabilitySpec.ideal(), seed=0)


@pytest.fixture
def default_model():
    return new_crossbar(8, 8, VariabilitySpec(), seed=11)


@pytest.fixture
def ideal_backend(ideal_model):
    return DirectBackend(ideal_model)


def quiet_spec(v_th_mean=0.12, v_th_sd=0.05):
    """Default threshold spread but no read noise or quantization."""
    return VariabilitySpec(v_th_mean=v_th_mean, v_th_sd=v_th_sd, read_noise_sd=0.0, adc_bits=None)


def rng(seed=0):
    return np.random.default_rng(seed)


# --- acceptance verdicts ---------------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_verdict(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
