import pytest

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
    terminalreporter.section("acceptance criteria")
    for criterion, status, details in _RESULTS:
        terminalreporter.write_line(f"{status}: {criterion} [{details}]")
