import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import pytest

_LINES_ATTR = "_acceptance_lines"


@pytest.fixture
def acceptance_report(pytestconfig):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = pytestconfig.__dict__.setdefault(_LINES_ATTR, [])

    def report(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {title}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get(_LINES_ATTR)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
