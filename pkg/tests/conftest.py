import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record and print one verdict line; the test still asserts on its own."""

    def record(number: int, ok: bool, detail: str, seconds: float, budget: float):
        line = (f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  "
                f"[{seconds:.1f} s / budget {budget:.0f} s]")
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
