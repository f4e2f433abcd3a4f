import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome, then assert it."""
    def record(number: int, name: str, ok: bool, detail: str = ""):
        request.config.stash.setdefault(_RESULTS, []).append((number, name, bool(ok), detail))
        assert ok, f"criterion {number} ({name}) failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(results):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {name}: {detail}")
