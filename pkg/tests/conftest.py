import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion, printed after the run."""
    table = request.config.stash[_KEY]

    def record(number: int, ok: bool, detail: str) -> bool:
        table[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash[_KEY]
    if table:
        terminalreporter.section("acceptance criteria")
        for k in sorted(table):
            terminalreporter.write_line(table[k])
