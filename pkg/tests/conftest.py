import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def record_criterion(request):
    """record_criterion(num, title, ok, detail) keeps one line per acceptance criterion."""
    results = request.config.stash[_RESULTS]

    def record(num, title, ok, detail):
        results[num] = (bool(ok), title, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, title, detail = results[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}")
