import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request, capsys):
    """Record one pass/fail line; the lines are repeated in the terminal summary."""
    lines = request.config.stash[_LINES]

    def record(label: str, ok: bool | None, detail: str) -> bool | None:
        status = "MEASURED" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {label}: {status} {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
