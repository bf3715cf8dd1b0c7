import pytest

_LINES: dict[int, list[str]] = {}


class AcceptanceLog:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(self, n: int, ok: bool, detail: str) -> bool:
        _LINES.setdefault(n, []).append(f"ACCEPTANCE C{n:<2d} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        for line in _LINES[n]:
            terminalreporter.write_line(line)
