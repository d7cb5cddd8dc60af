import os

import numpy as np
import pytest
from hypothesis import settings

from aaas.riskcore import (
    ELTerms,
    EventLossTable,
    Layer,
    LayerTerms,
    Portfolio,
    YearEventTable,
)

settings.register_profile("ci", max_examples=200, deadline=None)
settings.register_profile("dev", max_examples=30, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))


@pytest.fixture
def desk_case():
    """Two-trial hand-checkable case: trial losses 35.0 and 0.0."""
    elts = [
        EventLossTable(np.array([0.0, 60.0, 0.0]), ELTerms(0.0, 1e12)),
    ]
    layer = Layer((0,), LayerTerms(10.0, 40.0, 5.0, 100.0))
    yet = YearEventTable.from_trials([[(1, 12.5)], [(0, 3.0), (2, 40.0)]], 3)
    return Portfolio.single(layer), yet, elts


@pytest.fixture
def start_daemon():
    """Factory for in-process daemons on ephemeral loopback ports, shut down afterwards."""
    from aaas.server import Daemon, ServerConfig

    started = []

    def start(**kw):
        kw.setdefault("max_lanes", 4)
        daemon = Daemon(ServerConfig(**kw))
        daemon.start()
        started.append(daemon)
        return daemon

    yield start
    for daemon in started:
        daemon.shutdown(drain_timeout=2.0)



# --- acceptance summary: one line per criterion ----------------------------------------

_criteria: dict[int, dict] = {}
_criterion_key = pytest.StashKey[int]()


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            number, title = mark.args
            _criteria.setdefault(number, {"title": title, "outcomes": [], "notes": []})
            item.stash[_criterion_key] = number


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    number = item.stash.get(_criterion_key, None)
    if number is None:
        return
    entry = _criteria[number]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
            entry["outcomes"].append("SKIP")
            entry["notes"].append(reason.removeprefix("Skipped: "))
        else:
            entry["outcomes"].append("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            verdict = "NOT RUN"
        elif "FAIL" in outcomes:
            verdict = "FAIL"
        elif all(o == "SKIP" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        note = f" ({'; '.join(entry['notes'])})" if entry["notes"] else ""
        terminalreporter.write_line(f"criterion {number} [{entry['title']}]: {verdict}{note}")
