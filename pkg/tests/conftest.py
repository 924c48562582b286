import pytest

_LINES: list[str] = []


@pytest.fixture
def accept():
    """Record one acceptance verdict line; the caller still asserts."""

    def record(name: str, ok: bool | None, detail: str) -> bool:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        _LINES.append(f"[{status}] {name}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
