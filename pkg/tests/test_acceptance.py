"""Acceptance criteria at their stated tolerances.

Each criterion runs once per session; its summary line (and the individual
checks) are printed to the terminal whether it passes or fails.
"""

import pytest

from illiq.acceptance import CRITERIA, run_all


@pytest.fixture(scope="module")
def results():
    return {r.number: r for r in run_all()}


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(results, number, capsys):
    r = results[number]
    with capsys.disabled():
        print()
        print(r.line())
        for c in r.checks:
            print(f"    [{'ok' if c.ok else 'XX'}] {c.label}: {c.detail}")
    assert r.error is None, r.error
    assert r.passed, "; ".join(f"{c.label}: {c.detail}" for c in r.checks if not c.ok)
