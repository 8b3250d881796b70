import numpy as np
import pytest

from eisnn.gradcheck import TOLERANCE, corrupted_backward, relative_error, run_grad_check


def test_relative_error_definition():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(np.sqrt(2))
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_default_check_passes_on_every_parameter():
    res = run_grad_check(seed=1)
    assert res.passed and res.max_error < TOLERANCE
    assert res.min_denominator > 1e-6           # not passing by comparing zeros
    names = set(res.errors)
    for l in range(2):
        assert {f"layer{l}.{n}" for n in ("W_EE", "W_IE", "W_EI", "g_E", "g_I", "b_E")} <= names
    assert res.to_dict()["passed"] is True


def test_perturbed_backward_is_caught():
    with corrupted_backward(1.05):
        res = run_grad_check()
    assert not res.passed and res.max_error > 10 * TOLERANCE
    # the patch is removed on exit
    assert run_grad_check().passed
