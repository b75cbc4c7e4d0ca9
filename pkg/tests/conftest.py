import numpy as np
import pytest

from segrobust.data import SynthConfig, generate_synthetic
from segrobust.model import UNetConfig, build_unet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return build_unet(UNetConfig(depth=1, base_channels=2, input_size=(16, 16)), seed=5, label="tiny")


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(SynthConfig(count=6, height=16, width=16, seed=11))


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
