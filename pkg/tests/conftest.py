from __future__ import annotations

from collections import OrderedDict

import numpy as np
import pytest

from mednvc.diffcore import configure_threads

configure_threads(0)

_criteria: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    entry = _criteria.setdefault(num, {"title": title, "ok": True, "ran": False})
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        entry["ran"] = True
        if call.excinfo is not None:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        entry = _criteria[num]
        status = "PASS" if entry["ok"] and entry["ran"] else ("FAIL" if entry["ran"] else "NOT RUN")
        terminalreporter.write_line(f"{status} criterion {num}: {entry['title']}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
