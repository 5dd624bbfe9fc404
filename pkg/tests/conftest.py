import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def report(request):
    """Print one result line immediately (bypassing capture) and keep it for the session summary."""
    capture = request.config.pluginmanager.getplugin("capturemanager")

    def emit(label, ok, detail):
        status = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{label}: {status}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capture.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
