import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FAST = os.environ.get("TRVB_FAST", "") not in ("", "0")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


class AcceptanceRecorder:
    """Collect sub-checks of one acceptance criterion and emit a single verdict line."""

    def __init__(self):
        self.number = None
        self.title = ""
        self.checks = []

    def start(self, number, title):
        self.number, self.title = number, title

    def check(self, name, ok, detail=""):
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    def skip(self, reason):
        line = f"CRITERION {self.number:2d}: SKIP — {self.title}: {reason}"
        ACCEPTANCE[self.number] = line
        print(line)
        pytest.skip(reason)

    def finish(self):
        ok = all(c[1] for c in self.checks)
        parts = "; ".join(f"{n} {'ok' if o else 'FAILED'}{f' ({d})' if d else ''}" for n, o, d in self.checks)
        line = f"CRITERION {self.number:2d}: {'PASS' if ok else 'FAIL'} — {self.title}: {parts}"
        ACCEPTANCE[self.number] = line
        print(line)
        assert ok, line


@pytest.fixture
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
