import numpy as np

from sparseplan.gradcheck import check_gradient
from sparseplan.layers import (
    grid_encoding,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    sinusoidal_encoding,
    tanh_backward,
    tanh_forward,
    unitnorm_backward,
    unitnorm_forward,
)
from sparseplan.rng import seeded_stream


def scalarize(fwd, cot):
    return lambda out: float((out * cot).sum())


def test_linear_backward_fd():
    s = seeded_stream(0, "lin")
    x, W, b = s.normal((3, 4, 5)), s.normal((5, 6)), s.normal(6)
    cot = s.normal((3, 4, 6))
    out, cache = linear_forward(x, W, b)
    dx, dW, db = linear_backward(cache, cot)
    for vec, grad, rebuild in [
        (x, dx, lambda v: linear_forward(v.reshape(x.shape), W, b)[0]),
        (W, dW, lambda v: linear_forward(x, v.reshape(W.shape), b)[0]),
        (b, db, lambda v: linear_forward(x, W, v)[0]),
    ]:
        rep = check_gradient(lambda v: float((rebuild(v) * cot).sum()),
                             vec.ravel(), grad.ravel(), step=1e-6,
                             tolerance=1e-7, coords=range(0, vec.size, 7))
        assert rep.passed, rep


def test_tanh_backward_fd():
    s = seeded_stream(1, "tanh")
    x = s.normal((4, 4))
    cot = s.normal((4, 4))
    y, cache = tanh_forward(x)
    dx = tanh_backward(cache, cot)
    rep = check_gradient(
        lambda v: float((np.tanh(v.reshape(x.shape)) * cot).sum()),
        x.ravel(), dx.ravel(), step=1e-6, tolerance=1e-8,
    )
    assert rep.passed, rep


def test_layernorm_normalizes_and_backward_fd():
    s = seeded_stream(2, "ln")
    x = 3.0 * s.normal((5, 8)) + 2.0
    y, cache = layernorm_forward(x)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-4)

    cot = s.normal((5, 8))
    dx = layernorm_backward(cache, cot)
    rep = check_gradient(
        lambda v: float((layernorm_forward(v.reshape(x.shape))[0] * cot).sum()),
        x.ravel(), dx.ravel(), step=1e-6, tolerance=1e-6,
    )
    assert rep.passed, rep


def test_layernorm_other_axis():
    s = seeded_stream(3, "ln0")
    x = s.normal((6, 3))
    y, cache = layernorm_forward(x, axis=0)
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-9)
    cot = s.normal((6, 3))
    dx = layernorm_backward(cache, cot)
    rep = check_gradient(
        lambda v: float((layernorm_forward(v.reshape(x.shape), axis=0)[0] * cot).sum()),
        x.ravel(), dx.ravel(), step=1e-6, tolerance=1e-6,
    )
    assert rep.passed, rep


def test_unitnorm_rows_and_backward_fd():
    s = seeded_stream(4, "un")
    x = s.normal((4, 6))
    y, cache = unitnorm_forward(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-6)

    cot = s.normal((4, 6))
    dx = unitnorm_backward(cache, cot)
    rep = check_gradient(
        lambda v: float((unitnorm_forward(v.reshape(x.shape))[0] * cot).sum()),
        x.ravel(), dx.ravel(), step=1e-6, tolerance=1e-6,
    )
    assert rep.passed, rep


def test_positional_tables_are_fixed_and_bounded():
    pe = sinusoidal_encoding(16, 8)
    np.testing.assert_array_equal(pe, sinusoidal_encoding(16, 8))
    assert np.abs(pe).max() <= 1.0
    grid = grid_encoding(4, 3, 10)
    assert grid.shape == (12, 10)
    # distinct cells get distinct codes
    assert len({row.tobytes() for row in grid}) == 12
