import pytest

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, name = mark.args
    measured = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    prev = _criteria.get(number)
    passed = rep.passed and (prev is None or prev[1])
    _criteria[number] = (name, passed, measured or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        name, passed, measured = _criteria[number]
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  [{measured}]" if measured else ""))
