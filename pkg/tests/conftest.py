import sys
from collections import OrderedDict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = OrderedDict()  # id -> {"title", "outcomes", "notes"}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion this test belongs to")


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    cid, title = mark.args
    return _CRITERIA.setdefault(cid, {"title": title, "outcomes": [], "notes": []})


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion summary line."""
    entry = _entry(request.node)
    return (lambda text: entry["notes"].append(text)) if entry is not None else (lambda text: None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry["outcomes"].append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, entry in _CRITERIA.items():
        failed = [name for name, o in entry["outcomes"] if o != "passed"]
        status = "PASS" if entry["outcomes"] and not failed else "FAIL"
        line = f"{status} {cid}: {entry['title']}"
        if entry["notes"]:
            line += " [" + "; ".join(entry["notes"]) + "]"
        if failed:
            line += " (failing: " + ", ".join(failed) + ")"
        tr.write_line(line)
