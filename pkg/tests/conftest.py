import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from kmig import GuestSpec, build_guest  # noqa: E402

settings.register_profile(
    "kmig",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("kmig")


@pytest.fixture
def small_guest():
    return build_guest(GuestSpec(num_files=40, num_processes=3, seed=7))


@pytest.fixture
def guest400():
    return build_guest(GuestSpec(num_files=400, num_processes=4, seed=0))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
