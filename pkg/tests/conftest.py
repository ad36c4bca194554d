import re

_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    name = props.get("criterion")
    if name is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        outcome = "PASS" if report.passed else "FAIL"
        _RESULTS[name] = (outcome, props.get("measured", ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda n: int(re.sub(r"\D", "", n) or 0)
    for name in sorted(_RESULTS, key=key):
        outcome, measured = _RESULTS[name]
        terminalreporter.write_line(f"{name:5s} {outcome}  {measured}")
