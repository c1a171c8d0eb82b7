import numpy as np
import pytest

from spikescr import compute as C


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param64(arr):
    """float64 leaf for finite-difference checks."""
    return C.Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def accept(request):
    """Record one acceptance line: ``accept(n, passed, detail)``."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(n: int, passed: bool, detail: str) -> bool:
        lines.append((n, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d}: {detail}")
