import pytest

# criterion name -> (passed, detail), filled by the acceptance tests
ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion under ``name``."""
    names = []

    def record(name, passed, detail=""):
        names.append(name)
        ACCEPTANCE[name] = (bool(passed), detail)
        return passed

    yield record
    failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else False
    for name in names:
        if failed and ACCEPTANCE[name][0]:
            ACCEPTANCE[name] = (False, ACCEPTANCE[name][1] + " (test raised)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
