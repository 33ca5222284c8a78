import pytest

_VERDICTS = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one part of a numbered acceptance criterion."""
    def record(number, part, ok, detail=""):
        _VERDICTS.setdefault(number, []).append((part, bool(ok), detail))
        print(f"criterion {number} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        parts = _VERDICTS[number]
        ok = all(p[1] for p in parts)
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}")
        for part, good, detail in parts:
            terminalreporter.write_line(f"    {part}: {'pass' if good else 'fail'} {detail}".rstrip())
