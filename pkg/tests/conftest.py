import numpy as np
import pytest

import helpers


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in str(getattr(r, "nodeid", ""))
              for reps in terminalreporter.stats.values() for r in reps)
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 14):
        terminalreporter.write_line(helpers.ACCEPTANCE.get(n, f"criterion {n:2d} FAIL  no verdict (test errored or was not run)"))
