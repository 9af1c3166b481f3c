import pytest

DETAILS = pytest.StashKey[dict]()
OUTCOMES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.stash[DETAILS] = {}
    config.stash[OUTCOMES] = {}


@pytest.fixture
def verdict(request):
    """Record a one-line measurement for the acceptance summary."""
    marker = request.node.get_closest_marker("criterion")

    def record(text):
        request.config.stash[DETAILS][marker.args[0]] = text

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    outcomes = item.config.stash[OUTCOMES]
    passed = outcomes.get(number, (title, True))[1]
    if report.failed or (report.when == "call" and not report.passed):
        passed = False
    outcomes[number] = (title, passed)


def pytest_terminal_summary(terminalreporter, config):
    outcomes = config.stash[OUTCOMES]
    if not outcomes:
        return
    details = config.stash[DETAILS]
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        title, passed = outcomes[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if number in details:
            line += f": {details[number]}"
        terminalreporter.write_line(line)
