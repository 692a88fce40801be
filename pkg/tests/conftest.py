import numpy as np
import pytest

from coopisac.geometry import ArrayConfig, BaseStation, Scenario, Target, WaveformConfig, chi_facing
from coopisac.waveform import design_region_beamformer

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def facing_pair(array=None, wf=None, targets=(), tx=(-500.0, 0.0, 30.0), rx=(500.0, 0.0, 30.0)):
    """Two base stations on the x axis, both facing the origin."""
    array = array or ArrayConfig()
    bss = (BaseStation(tx, chi_facing(tx, (0, 0, tx[2])), "transceiver", array),
           BaseStation(rx, chi_facing(rx, (0, 0, rx[2])), "transceiver", array))
    return Scenario(bss, tuple(targets), array, wf or WaveformConfig())


@pytest.fixture(scope="session")
def region_bf():
    return design_region_beamformer(ArrayConfig(), (40.0, 90.0), (40.0, 140.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def target(pos, vel=(0.0, 0.0, 0.0), rcs=0.01):
    return Target(pos, vel, rcs)
