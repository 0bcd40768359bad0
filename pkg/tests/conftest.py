import re

import pytest

CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
RESULTS, NOTES = {}, {}


def _criterion(nodeid):
    if "test_acceptance.py" not in nodeid:
        return None
    m = CRITERION.search(nodeid)
    return (int(m.group(1)), m.group(2)) if m else None


def pytest_runtest_logreport(report):
    key = _criterion(report.nodeid)
    if key is None:
        return
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        RESULTS[key] = "FAIL" if failed else "PASS"


@pytest.fixture
def note(request):
    """Attach a measurement line to the criterion summary."""
    key = _criterion(request.node.nodeid)

    def add(text):
        NOTES.setdefault(key, []).append(str(text))

    return add


def pytest_terminal_summary(terminalreporter, config):
    if not RESULTS:
        return
    results, tr = RESULTS, terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(results):
        n, name = key
        tr.write_line(f"{results[key]} criterion {n:2d} {name}")
        for line in NOTES.get(key, []):
            tr.write_line(f"    {line}")
    passed = sum(v == "PASS" for v in results.values())
    tr.write_line(f"{passed}/{len(results)} criteria pass")
