import importlib.util

import pytest

# The exporter suite needs its own package plus torch. When either is not
# installed (for instance while only the simulator side is set up), skip
# collection of this directory instead of erroring the whole run.
if any(importlib.util.find_spec(m) is None for m in ("xbnn_export", "torch", "yaml")):
    collect_ignore_glob = ["*"]

_RESULTS: list[tuple[str, str, str]] = []


@pytest.fixture
def acceptance():
    """Recorder for acceptance-criterion outcomes, echoed after the run."""

    def record(criterion: str, ok: bool, details: str) -> None:
        _RESULTS.append((criterion, "PASS" if ok else "FAIL", details))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("exporter acceptance criteria")
    for criterion, status, details in _RESULTS:
        terminalreporter.write_line(f"{status}: {criterion} [{details}]")
