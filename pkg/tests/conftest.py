import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record one ``AC-k PASS|FAIL: details`` line for the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(name, passed, details):
        line = f"{name} {'PASS' if passed else 'FAIL'}: {details}"
        lines.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
