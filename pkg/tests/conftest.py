from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion a test belongs to")


def pytest_collection_finish(session):
    # session.items is the post-deselection list
    for item in session.items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            entry = _CRITERIA.setdefault(number, {"title": title, "nodes": set(), "failed": False, "ran": 0})
            entry["nodes"].add(item.nodeid)


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid in entry["nodes"]:
            if report.when == "call":
                entry["ran"] += 1
            if report.failed:
                entry["failed"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        if entry["failed"] or 0 < entry["ran"] < len(entry["nodes"]):
            verdict = "FAIL"
        elif entry["ran"] == 0:
            verdict = "NOT RUN"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {entry['title']}")
