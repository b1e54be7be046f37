import numpy as np
import pytest

from curvislice import acceptance

_RESULTS = {}


def acceptance_result(k: int):
    """Run criterion ``k`` once per session and cache the outcome."""
    if k not in _RESULTS:
        _RESULTS[k] = acceptance.run_criterion(k)
    return _RESULTS[k]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[k].line())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
