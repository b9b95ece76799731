import numpy as np
import pytest

from splitcomp.injector import SplitConfig, inject
from splitcomp.model.zoo import build_teacher


@pytest.fixture(scope="session")
def resnet():
    return build_teacher("small_resnet", (3, 32, 32), 10, seed=0)


@pytest.fixture(scope="session")
def densenet():
    return build_teacher("small_densenet", (3, 32, 32), 10, seed=0)


@pytest.fixture(scope="session")
def bmodel(resnet):
    return inject(resnet, SplitConfig("SP1", 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import _report

    if _report.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_report.LINES):
            terminalreporter.write_line(_report.LINES[n])
