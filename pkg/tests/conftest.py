import numpy as np
import pytest

from transmute import builtin_model


@pytest.fixture(scope="session")
def tml():
    """Two-mode-linear with its default (unit) rates."""
    return builtin_model("two-mode-linear")


@pytest.fixture(scope="session")
def tml5():
    """Two-mode-linear in the exit regime used by the pipeline (c21 = 5)."""
    return builtin_model("two-mode-linear", {"c21": 5})


@pytest.fixture(scope="session")
def ou():
    return builtin_model("ou-k1", {"theta": 1})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
