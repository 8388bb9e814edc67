import pytest

# (number, title, status, detail) appended by tests/test_acceptance.py
ACCEPTANCE: list[tuple[int, str, str, str]] = []
_RECORDED: set[str] = set()


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((number, title, "PASS" if passed else "FAIL", detail))
        _RECORDED.add(request.node.nodeid)
        assert passed, f"criterion {number} ({title}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    crashed = [r.nodeid for r in terminalreporter.stats.get("failed", []) + terminalreporter.stats.get("error", [])
               if "test_acceptance" in r.nodeid and r.nodeid not in _RECORDED]
    if not ACCEPTANCE and not crashed:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")
    for nodeid in crashed:
        terminalreporter.write_line(f"[FAIL] {nodeid}: raised before reaching its verdict")
