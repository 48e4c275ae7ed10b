import numpy as np
import pytest

from wignerbath.morse import MorseSpec
from wignerbath.wigner import Superposition, build_wigner


@pytest.fixture(scope="session")
def morse():
    return MorseSpec.i2()


@pytest.fixture(scope="session")
def grids(morse):
    return {label: build_wigner(morse, Superposition.parse(label)) for label in ("0", "0+2", "5+8")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line; returns the pass flag so tests can assert on it."""
    def record(number, passed, detail):
        passed = bool(passed)
        _VERDICTS[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in _VERDICTS:
            ok, detail = _VERDICTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
