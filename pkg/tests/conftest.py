import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    """``{criterion: [(clause, passed, detail), ...]}`` filled by the acceptance tests."""
    return request.config.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, {})
    if not log:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion, clauses in log.items():
        ok = all(passed for _, passed, _ in clauses)
        tr.write_line(f"{'PASS' if ok else 'FAIL'} {criterion}")
        for clause, passed, detail in clauses:
            tr.write_line(f"    {'pass' if passed else 'fail'} {clause}: {detail}")
