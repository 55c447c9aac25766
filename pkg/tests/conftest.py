import pytest
from hypothesis import settings

settings.register_profile("tvfl", deadline=None, derandomize=True)
settings.load_profile("tvfl")

_CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Registry of ``{number: (passed, title, detail)}`` printed after the run."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
