import sys

import numpy as np
import pytest

from bevshift.config import load_setup


@pytest.fixture(scope="session")
def setup():
    return load_setup()


@pytest.fixture(scope="session")
def pt(setup):
    return setup.powertrain


@pytest.fixture(scope="session")
def table(setup):
    return setup.gears


@pytest.fixture(scope="session")
def hcfg(setup):
    return setup.horizon


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
