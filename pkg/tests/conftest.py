import re

_ACCEPTANCE = "test_acceptance.py::"
_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if _ACCEPTANCE not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1]
    if report.when == "call" or report.outcome != "passed":
        _results.setdefault(name, "PASS" if report.passed else "FAIL")
        if report.failed:
            _results[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _results.items():
        m = re.match(r"test_criterion_(\d+)_(\w+)", name)
        label = f"criterion {int(m.group(1)):2d}  {m.group(2).replace('_', ' ')}" if m else name
        terminalreporter.write_line(f"{outcome}  {label}")
