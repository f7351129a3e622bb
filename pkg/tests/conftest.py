import numpy as np
import pytest

from mshcnet import tensor as T


@pytest.fixture(autouse=True)
def float64_and_clean_tape():
    T.set_default_dtype(np.float64)
    T.get_tape().clear()
    yield
    T.get_tape().clear()
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line(request):
    """Record one pass/fail line for the end-of-session summary."""

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
