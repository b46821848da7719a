import pytest
from hypothesis import settings

settings.register_profile("opclab", deadline=None, max_examples=60)
settings.load_profile("opclab")

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """``record(n, ok, detail, seconds)`` prints and stores one pass/fail line."""

    def record(n, ok, detail, seconds):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({seconds:.2f} s) {detail}"
        print(line)
        _ACCEPTANCE.append((n, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
