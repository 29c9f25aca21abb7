import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is None or not mod.REPORT:
        return
    REPORT = mod.REPORT
    terminalreporter.section("acceptance criteria")
    for line in sorted(REPORT, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
