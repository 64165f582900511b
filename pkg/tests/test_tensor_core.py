"""Tape engine semantics: shapes, recording, accumulation, reuse errors."""

import numpy as np
import pytest

from nddr.autodiff import (
    GraphConsumedError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    scalar,
    set_check_finite,
)
from nddr import ops


def test_tensor_rejects_non_4d():
    for shape in ((3,), (2, 3), (2, 3, 4), (1, 2, 3, 4, 5)):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(shape))


def test_tensor_dtype_coercion():
    t = Tensor(np.arange(8, dtype=np.int64).reshape(1, 2, 2, 2))
    assert t.dtype == np.float32
    t64 = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float64))
    assert t64.dtype == np.float64


def test_item_requires_scalar():
    assert scalar(2.5).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 2))).item()


def test_backward_needs_scalar_loss():
    x = Tensor(np.ones((1, 1, 1, 3)), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones((1, 1, 1, 3)), requires_grad=True)
    y = ops.relu(x)
    assert y._tape is None
    with pytest.raises(GraphConsumedError):
        backward(y)


def test_tape_single_use():
    x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 3.0)
        tape.backward(y)
    with pytest.raises(GraphConsumedError):
        tape.backward(y)


def test_gradient_accumulates_over_shared_input():
    # y = x*x + x  =>  dy/dx = 2x + 1
    x = Tensor(np.array([[[[2.0, -3.0]]]]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum_all(ops.add(ops.mul(x, x), x))
        tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-6)


def test_grad_skipped_without_requires_grad():
    x = Tensor(np.ones((1, 1, 1, 2)))
    w = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.sum_all(ops.mul(x, w))
        tape.backward(y)
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, np.ones_like(w.data))


def test_ops_not_recorded_when_no_input_wants_grad():
    x = Tensor(np.ones((1, 1, 1, 2)))
    with Tape() as tape:
        ops.relu(ops.scale(x, 2.0))
        assert len(tape) == 0


def test_zero_grad_clears():
    x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        tape.backward(ops.scale(x, 2.0))
    assert x.grad is not None
    x.zero_grad()
    assert x.grad is None


def test_strict_shape_and_dtype_mismatch():
    a = Tensor(np.ones((1, 1, 1, 2), dtype=np.float32))
    b = Tensor(np.ones((1, 1, 2, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        ops.add(a, b)
    c = Tensor(np.ones((1, 1, 1, 2), dtype=np.float64))
    with pytest.raises(ShapeError):
        ops.add(a, c)


def test_finite_checking_toggle():
    x = Tensor(np.array([[[[1e300]]]], dtype=np.float64), requires_grad=True)
    with np.errstate(over="ignore"):
        set_check_finite(True)
        try:
            with pytest.raises(NonFiniteError):
                ops.mul(x, x)  # overflows to inf
        finally:
            set_check_finite(False)
        y = ops.mul(x, x)  # same op passes with checking off
    assert np.isinf(y.data).all()


def test_mean_and_sum_all():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(1, 1, 2, 3), requires_grad=True)
    with Tape() as tape:
        s = ops.sum_all(x)
        tape.backward(s)
    assert s.item() == 15.0
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))
    x.zero_grad()
    with Tape() as tape:
        m = ops.mean_all(x)
        tape.backward(m)
    assert m.item() == 2.5
    np.testing.assert_allclose(x.grad, np.full_like(x.data, 1 / 6))


def test_matmul_matches_numpy():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(1, 1, 4, 5)))
    b = Tensor(rng.normal(size=(1, 1, 5, 3)))
    out = ops.matmul(a, b)
    np.testing.assert_allclose(
        out.data[0, 0], a.data[0, 0].astype(np.float32) @ b.data[0, 0].astype(np.float32), rtol=1e-5
    )


def test_finite_difference_harness_flags_wrong_gradient():
    # A deliberately broken op: forward x^2 but gradient closure of x^3.
    from nddr.autodiff import accumulate_grad, emit

    def broken_square(x):
        def bwd(g):
            accumulate_grad(x, g * 3 * x.data ** 2, own=True)
        return emit("broken_square", x.data ** 2, (x,), bwd)

    x = Tensor(np.full((1, 1, 1, 1), 2.0, dtype=np.float64), requires_grad=True)
    err = finite_difference_check(lambda t: ops.sum_all(broken_square(t)), x)
    assert err > 0.1


def test_finite_difference_harness_accepts_correct_gradient():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 2, 3)), requires_grad=True, dtype=np.float64)
    err = finite_difference_check(lambda t: ops.mean_all(ops.mul(t, t)), x)
    assert err < 1e-7
