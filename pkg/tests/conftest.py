import numpy as np
import pytest

from planepose.volume import generate_phantom


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(7, (32, 32, 32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = []
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and hasattr(mod, "RESULTS"):
            lines = sorted(mod.RESULTS)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
