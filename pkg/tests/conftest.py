import pytest

CRITERIA = {
    1: "many-to-few exact identity",
    2: "Kolmogorov estimate",
    3: "Yaglom law",
    4: "reduced process",
    5: "split-time mixture",
    6: "CPP internal consistency",
    7: "multiple-merger environment",
    8: "property suites and reproducibility",
}

_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(int(marker.args[0]), []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        results = _outcomes.get(number)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"Criterion {number}: {status} ({title})")
