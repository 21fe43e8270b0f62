import re

import pytest

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, list] = {}


@pytest.fixture
def report(request):
    """Attach a one-line measurement summary to the current acceptance criterion."""
    match = re.search(r"test_criterion_(\d+)", request.node.name)
    number = int(match.group(1))
    ACCEPTANCE.setdefault(number, [None, ""])

    def note(text: str):
        ACCEPTANCE[number][1] = text
    return note


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    entry = ACCEPTANCE.setdefault(int(match.group(1)), [None, ""])
    if report.when == "call":
        entry[0] = report.passed
    elif report.failed:  # a broken fixture counts as a failure
        entry[0] = False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL" if passed is False else "NOT RUN"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}".rstrip())
