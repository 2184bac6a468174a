import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest

ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def benchmark():
    """Cached desk-scale surrogate: (cfg, dataset, model, meta)."""
    from pipeline import trained_benchmark

    return trained_benchmark()


@pytest.fixture
def record_criterion():
    """Store and print the verdict for one acceptance criterion."""

    def record(n, ok, detail):
        ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
