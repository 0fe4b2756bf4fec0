import warnings

import pytest

from gexpect.payoff import UnboundedPayoffWarning

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")
    warnings.simplefilter("ignore", UnboundedPayoffWarning)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "detail": []})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
    for name, value in item.user_properties:
        if name == "detail" and rep.when == "call":
            entry["detail"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(e["detail"])
        tr.write_line(f"criterion {n:2d} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(record_property):
    """Attach a short measured value to the acceptance summary line."""

    def add(text: str) -> None:
        record_property("detail", text)

    return add
