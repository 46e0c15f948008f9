import pytest

# one line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for one numbered criterion; the test body supplies the detail."""
    state = {"detail": ""}

    def record(number: int, title: str):
        state["number"], state["title"] = number, title
        return state

    yield record
    if "number" in state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        line = f"[{'PASS' if ok else 'FAIL'}] {state['number']}. {state['title']}"
        if state["detail"]:
            line += f": {state['detail']}"
        CRITERIA[state["number"]] = line
        print("\n" + line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
