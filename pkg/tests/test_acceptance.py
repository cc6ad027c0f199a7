"""Acceptance criteria 1-9 at their stated sizes and runtime budgets.

Every test prints one ``[PASS]``/``[FAIL]`` line (also collected in the
terminal summary) before asserting the full criterion.
"""
import time

import pytest

from mvsde import verify

pytestmark = pytest.mark.acceptance

# seconds; None means no budget
BUDGET = {1: 60, 2: 60, 3: 120, 4: 180, 5: 180, 6: 600, 7: 1, 8: 600, 9: None}
TAKES_COMPONENTS = {5, 6, 8}


def _run(k, desk, report):
    kwargs = {"comp": desk} if k in TAKES_COMPONENTS else {}
    t0 = time.perf_counter()
    res = verify.CHECKS[k](**kwargs)
    elapsed = time.perf_counter() - t0
    in_budget = BUDGET[k] is None or elapsed <= BUDGET[k]
    ok = bool(res["pass"]) and in_budget
    budget = "" if BUDGET[k] is None else f" / {BUDGET[k]} s"
    report(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {res['name']} "
           f"({elapsed:.1f} s{budget})")
    return res, elapsed, in_budget


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6, 7, 8, 9])
def test_criterion(k, desk, report):
    res, elapsed, in_budget = _run(k, desk, report)
    if k == 7 and not res["pass"]:
        print(f"  arithmetic oracle match: {res['arithmetic_pass']}; "
              f"tuples with sup factor >= 1 below tau_max: "
              f"{res['contraction_failures']}/{res['tuples']}")
    assert res["pass"], f"criterion {k} failed"
    assert in_budget, f"criterion {k} took {elapsed:.1f} s"


def test_constants_arithmetic_part(report):
    """The oracle-agreement half of criterion 7 holds on its own."""
    t0 = time.perf_counter()
    res = verify.check_constants()
    elapsed = time.perf_counter() - t0
    ok = res["arithmetic_pass"] and elapsed <= BUDGET[7]
    report(f"[{'PASS' if ok else 'FAIL'}] criterion 7 (arithmetic only): "
           f"{res['tuples']} tuples to 10 digits ({elapsed:.2f} s)")
    assert res["arithmetic_pass"]
    assert elapsed <= BUDGET[7]
