import pytest

_lines_key = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_lines_key] = []


@pytest.fixture
def acceptance(request):
    """Call with (criterion, passed, detail) to add a line to the acceptance summary."""
    lines = request.config.stash[_lines_key]

    def record(criterion: int, passed: bool, detail: str) -> bool:
        lines.append((criterion, f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_lines_key, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
