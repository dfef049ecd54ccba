import contextlib
import time

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")

# acceptance criteria outcomes, printed once at the end of the session
CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class _Outcome:
    def __init__(self):
        self.details = []

    def note(self, text):
        self.details.append(str(text))


@pytest.fixture
def criterion():
    @contextlib.contextmanager
    def run(number, title, budget_s=None):
        out = _Outcome()
        t0 = time.perf_counter()
        ok = False
        try:
            yield out
            ok = True
        finally:
            took = time.perf_counter() - t0
            if budget_s is not None and took > budget_s:
                out.note(f"over the {budget_s:.0f}s budget")
                ok = False
            CRITERIA[number] = (ok, title, took, "; ".join(out.details))
        if budget_s is not None and took > budget_s:
            pytest.fail(f"criterion {number} took {took:.1f}s, budget {budget_s:.0f}s")
    return run


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, title, took, detail = CRITERIA[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title} ({took:.1f}s)"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
