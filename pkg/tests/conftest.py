import numpy as np
import pytest
from hypothesis import settings

from flowdesk.rng import Rng

settings.register_profile("flowdesk", max_examples=40, deadline=None)
settings.load_profile("flowdesk")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    # independent generator for oracle-side data, so oracles never share a stream with the code under test
    return np.random.default_rng(99)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "detail": ""})
    if rep.failed or rep.skipped:
        entry["ok"] = False
        entry["detail"] = rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
    extra = getattr(item, "criterion_detail", None)
    if extra and entry["ok"]:
        entry["detail"] = extra


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        line = f"[{'PASS' if e['ok'] else 'FAIL'}] {number:2d}. {e['title']}"
        if e["detail"]:
            line += f" ({e['detail'].splitlines()[0][:150]})"
        terminalreporter.write_line(line)
