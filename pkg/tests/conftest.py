import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def criterion(request):
    """``criterion(n, detail)`` records the outcome of acceptance criterion ``n`` for this test."""
    state = {}

    def record(number, detail=""):
        state["number"], state["detail"] = number, detail

    yield record
    if "number" in state:
        rep = getattr(request.node, "rep_call", None)
        passed = rep is not None and rep.passed
        prev = ACCEPTANCE.get(state["number"])
        ok = passed and (prev is None or prev[0])
        details = [d for d in ((prev[1] if prev else ""), state["detail"]) if d]
        ACCEPTANCE[state["number"]] = (ok, "; ".join(details))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
