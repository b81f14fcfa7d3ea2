import time

import pytest

SUITE_BUDGET_S = 300.0
_lines = []
_start = {}


def pytest_sessionstart(session):
    _start["t"] = time.perf_counter()


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(num, name, ok, detail)``."""

    def emit(num, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  [{num}] {name}: {detail}"
        _lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    elapsed = time.perf_counter() - _start.get("t", time.perf_counter())
    tr = terminalreporter
    tr.section("acceptance criteria")
    for line in _lines:
        tr.write_line(line)
    ok = elapsed < SUITE_BUDGET_S
    tr.write_line(f"{'PASS' if ok else 'FAIL'}  [9b] suite wall time: {elapsed:.1f} s (limit {SUITE_BUDGET_S:.0f} s)")
