import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from clothspread.harness.cli import bundled_scenario_path
from clothspread.harness.config import load_scenario


@pytest.fixture(scope="session")
def bundled():
    """Loader for the scenarios shipped with the package."""
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = load_scenario(bundled_scenario_path(name))
        return cache[name]

    return get


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
