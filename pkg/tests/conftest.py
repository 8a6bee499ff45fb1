import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Record and print one acceptance line, then assert it."""

    def record(cid, title, ok, detail=""):
        line = f"[ACCEPT] {cid} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
        _VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
