import numpy as np
import pytest

from sparseplan.gradcheck import check_gradient, directional_check, relative_error


def test_quadratic_passes():
    report = check_gradient(lambda x: float(x[0] ** 2), np.array([3.0]),
                            np.array([6.0]), step=1e-5, tolerance=1e-8)
    assert report.passed
    assert report.max_relative_error <= 1e-8


def test_wrong_gradient_fails_with_expected_error():
    report = check_gradient(lambda x: float(x[0] ** 2), np.array([3.0]),
                            np.array([5.0]), step=1e-5, tolerance=1e-6)
    assert not report.passed
    # |5 - 6| / max(1, 5, 6) = 1/6
    assert report.max_relative_error == pytest.approx(1.0 / 6.0, rel=1e-3)
    assert report.worst_coordinate == 0


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def test_softmax_dot_matches_analytic_jacobian():
    # oracle: d/dz (t . softmax(z)) = diag(p) t - p (p . t)
    target = np.array([0.3, -1.2, 2.0, 0.5])
    point = np.array([0.1, 0.7, -0.4, 1.3])
    p = _softmax(point)
    analytic = p * target - p * float(p @ target)
    report = check_gradient(lambda z: float(target @ _softmax(z)), point,
                            analytic, step=1e-6, tolerance=1e-5)
    assert report.passed


def test_nonfinite_evaluation_is_explicit_failure():
    def fn(x):
        return np.inf if x[0] > 1.0 else float(x[0])

    report = check_gradient(fn, np.array([1.0]), np.array([1.0]), step=0.5)
    assert not report.passed
    assert "non-finite" in report.note


def test_halving_step_quarters_error_on_cubic():
    # f = x^3 at x=1: central difference error is exactly h^2
    point = np.array([1.0])
    grad = np.array([3.0])

    def err(h):
        rep = check_gradient(lambda x: float(x[0] ** 3), point, grad,
                             step=h, tolerance=np.inf)
        return rep.max_relative_error

    ratio = err(1e-3) / err(5e-4)
    assert 3.5 < ratio < 4.5


def test_coordinate_subset_restriction():
    point = np.arange(1.0, 6.0)
    grad = 2.0 * point
    grad[4] = 99.0  # wrong, but outside the checked subset
    report = check_gradient(lambda x: float(x @ x), point, grad,
                            step=1e-6, tolerance=1e-7, coords=[0, 1, 2, 3])
    assert report.passed


def test_directional_check_agrees():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6))
    A = A + A.T
    x = rng.standard_normal(6)
    report = directional_check(lambda z: float(z @ A @ z / 2), x, A @ x,
                               rng.standard_normal(6), step=1e-6, tolerance=1e-7)
    assert report.passed


def test_relative_error_denominator_floors_at_one():
    assert relative_error(1e-8, 0.0) == pytest.approx(1e-8)
    assert relative_error(200.0, 100.0) == pytest.approx(0.5)
