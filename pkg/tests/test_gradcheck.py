"""Finite-difference oracle: every op, head and loss; the composite objective on the tiny preset."""

import numpy as np
import pytest

from geounify.gradcheck import (
    COMPOSITE_TOL,
    OP_CHECKS,
    OP_TOL,
    GradCheckResult,
    check_gradients,
    format_results,
    rel_error,
    run_suite,
)
from geounify.tensor import Parameter, _result, as_tensor, precision, tsum


def _double_grad_square(a):
    a = as_tensor(a)
    ad = a.data
    return _result("bad_square", ad * ad, (a,), lambda g: (4.0 * g * ad,))


def test_rel_error_uses_the_floor():
    assert rel_error(0.0, 0.0, floor=1e-6) == 0.0
    assert rel_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert rel_error(1e-9, 0.0, floor=1e-6) == pytest.approx(1e-3)


def test_checker_flags_a_wrong_backward(rng):
    with precision(np.float64):
        x = Parameter(rng.normal(size=5) + 2.0, name="x")
        errs = check_gradients([x], lambda: tsum(_double_grad_square(x)), rng, coords=5)
    worst, n = errs["x"]
    assert n == 5
    assert worst == pytest.approx(0.5, abs=1e-4)


@pytest.mark.parametrize("name", sorted(OP_CHECKS))
def test_analytic_gradients_match_finite_differences(name):
    results = run_suite(seed=3, coords=8, only=[name])
    assert [r.group for r in results] == [name]
    assert results[0].passed, format_results(results)
    assert results[0].tol == OP_TOL


def test_composite_objective_on_tiny_model():
    results = run_suite(seed=0, composite_coords=5, only=["composite"])
    groups = {r.group for r in results}
    assert {"composite.ground_enc", "composite.aerial_enc", "composite.dec", "composite.proj"} <= groups
    assert all(r.tol == COMPOSITE_TOL for r in results)
    assert all(r.passed for r in results), format_results(results)


def test_format_marks_failures():
    text = format_results([GradCheckResult("op.x", 1e-6, 4, 1e-3), GradCheckResult("op.y", 0.5, 4, 1e-3)])
    lines = text.splitlines()
    assert lines[1].endswith("ok")
    assert lines[2].endswith("FAIL")
