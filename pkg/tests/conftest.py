"""Per-criterion pass/fail summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, title, budget=seconds)`` are grouped by
``n``. A criterion passes when every tagged test passes and their summed call
time (setup included) stays inside the budget; a budget overrun also fails the session.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import pytest


@dataclass
class _Criterion:
    title: str
    budget: float | None
    outcomes: list[str] = field(default_factory=list)
    failed_ids: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def verdict(self) -> str:
        if not self.outcomes:
            return "NOT RUN"
        if any(o == "failed" for o in self.outcomes):
            return "FAIL"
        if all(o == "skipped" for o in self.outcomes):
            return "SKIP"
        if self.budget is not None and self.seconds > self.budget:
            return "FAIL"
        return "PASS"


_CRITERIA: dict[int, _Criterion] = {}
_NODE: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title, budget=None): acceptance criterion n")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is None:
            continue
        n, title = mark.args
        _CRITERIA.setdefault(n, _Criterion(title, mark.kwargs.get("budget")))
        _NODE[item.nodeid] = n


def pytest_runtest_logreport(report):
    n = _NODE.get(report.nodeid)
    if n is None:
        return
    crit = _CRITERIA[n]
    crit.seconds += report.duration  # setup counts too: module fixtures do real work
    if report.when == "call":
        crit.outcomes.append(report.outcome)
        if report.failed:
            crit.failed_ids.append(report.nodeid.split("::")[-1])
    elif report.outcome != "passed":  # setup errors and skips
        crit.outcomes.append("skipped" if report.skipped else "failed")
        if report.failed:
            crit.failed_ids.append(report.nodeid.split("::")[-1])


def pytest_sessionfinish(session, exitstatus):
    over = [c for c in _CRITERIA.values() if c.budget is not None and c.outcomes and c.seconds > c.budget]
    if over and exitstatus == 0:
        session.exitstatus = pytest.ExitCode.TESTS_FAILED


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        c = _CRITERIA[n]
        passed = sum(o == "passed" for o in c.outcomes)
        budget = f" / budget {c.budget:g}s" if c.budget is not None else ""
        line = (f"criterion {n:>2} {c.verdict():<7} {c.title}: {passed}/{len(c.outcomes)} tests, "
                f"{c.seconds:.1f}s{budget}")
        if c.failed_ids:
            shown = ", ".join(c.failed_ids[:8]) + (" ..." if len(c.failed_ids) > 8 else "")
            line += f"  [failed: {shown}]"
        tr.write_line(line)
