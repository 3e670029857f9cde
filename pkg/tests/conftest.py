import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): one primary acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _RESULTS[name] = "PASS" if call.excinfo is None else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _RESULTS.items():
        terminalreporter.write_line(f"{outcome} {name}")


@pytest.fixture
def report(capsys):
    """Print measured values so they survive output capture in the final log."""

    def emit(msg: str) -> None:
        with capsys.disabled():
            print(f"\n    {msg}", end="")

    return emit
