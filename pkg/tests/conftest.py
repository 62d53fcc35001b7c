import numpy as np
import pytest
import torch

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def static_orbit():
    from dynrecon import synth

    return synth.generate(synth.preset("static_orbit"))


@pytest.fixture(scope="session")
def one_mover():
    from dynrecon import synth

    return synth.generate(synth.preset("one_mover"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
