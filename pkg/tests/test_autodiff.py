import numpy as np
import pytest

from mvpconv.autodiff import (
    Tape,
    Tensor,
    backward_pass,
    elementwise_add,
    elementwise_mul,
    finite_diff_grad,
    max_rel_error,
    parameter,
    scale,
    tensor_sum,
)
from mvpconv.errors import ContractViolation, OracleFailure, UnknownOutputError


def test_sum_gradient_is_ones():
    x = parameter(np.array([1.0, 2.0, 3.0]))
    with Tape() as tape:
        loss = tensor_sum(x)
    grads = backward_pass(tape, loss, wrt=[x])
    np.testing.assert_array_equal(grads[x].data, np.ones(3))


def test_quadratic_gradient():
    x = parameter(np.array([2.0, -1.0]))
    with Tape() as tape:
        loss = scale(tensor_sum(elementwise_mul(x, x)), 0.5)
    grads = backward_pass(tape, loss, wrt=[x])
    np.testing.assert_allclose(grads[x].data, [2.0, -1.0], atol=1e-12)


def test_elementwise_add_values():
    out = elementwise_add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_add_zero_is_identity():
    a = Tensor(np.random.default_rng(0).standard_normal(5))
    out = elementwise_add(a, Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, a.data)


def test_add_shape_mismatch():
    with pytest.raises(ContractViolation):
        elementwise_add(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_add_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = parameter(rng.standard_normal(4))
    b = parameter(rng.standard_normal(4))
    with Tape() as tape:
        loss = tensor_sum(elementwise_add(a, b))
    grads = backward_pass(tape, loss, wrt=[a, b])
    np.testing.assert_array_equal(grads[a].data, np.ones(4))

    def f(x):
        with Tape() as t:
            loss = tensor_sum(elementwise_add(x, b))
        return loss
    fd = finite_diff_grad(f, a)
    assert max_rel_error(grads[a].data, fd.data) < 1e-8


def test_shared_input_gradient_accumulates():
    # y = x + x must give gradient 2 despite the backward rule returning the
    # same array object for both inputs.
    x = parameter(np.array([3.0, -4.0]))
    with Tape() as tape:
        loss = tensor_sum(elementwise_add(x, x))
    grads = backward_pass(tape, loss, wrt=[x])
    np.testing.assert_array_equal(grads[x].data, [2.0, 2.0])


def test_finite_diff_simple_square():
    fd = finite_diff_grad(lambda t: t.data[0] ** 2, Tensor([3.0]), 1e-5)
    assert abs(fd.data[0] - 6.0) < 1e-8


def test_finite_diff_constant_map():
    fd = finite_diff_grad(lambda t: 7.5, Tensor(np.arange(4.0)))
    np.testing.assert_array_equal(fd.data, np.zeros(4))


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(OracleFailure):
        finite_diff_grad(lambda t: float("nan"), Tensor([1.0]))


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractViolation):
        finite_diff_grad(lambda t: 0.0, Tensor([1.0]), h=0.0)


def test_loss_must_be_scalar():
    x = parameter(np.ones(3))
    with Tape() as tape:
        y = elementwise_add(x, x)
    with pytest.raises(ContractViolation):
        backward_pass(tape, y)


def test_loss_must_be_on_tape():
    x = parameter(np.ones(3))
    with Tape() as tape:
        tensor_sum(x)
    stray = Tensor(np.array(1.0))
    with pytest.raises(UnknownOutputError):
        backward_pass(tape, stray)


def test_unused_leaf_gets_zero_gradient():
    x = parameter(np.ones(3))
    unused = parameter(np.ones(2))
    with Tape() as tape:
        loss = tensor_sum(x)
    grads = backward_pass(tape, loss, wrt=[x, unused])
    np.testing.assert_array_equal(grads[unused].data, np.zeros(2))


def test_backward_linearity():
    rng = np.random.default_rng(2)
    x = parameter(rng.standard_normal(6))

    def grad_of(fn):
        with Tape() as tape:
            loss = fn(x)
        return backward_pass(tape, loss, wrt=[x])[x].data

    f1 = lambda t: tensor_sum(elementwise_mul(t, t))
    f2 = lambda t: scale(tensor_sum(t), 3.0)
    combined = lambda t: elementwise_add(f1(t), f2(t))
    np.testing.assert_allclose(grad_of(combined), grad_of(f1) + grad_of(f2), rtol=1e-12)


def test_identical_tape_rerun_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    a = parameter(rng.standard_normal(8))
    b = parameter(rng.standard_normal(8))

    def run():
        with Tape() as tape:
            h = elementwise_mul(a, b)
            loss = tensor_sum(elementwise_add(h, elementwise_mul(h, h)))
        g = backward_pass(tape, loss, wrt=[a, b])
        return g[a].data.copy(), g[b].data.copy()

    ga1, gb1 = run()
    ga2, gb2 = run()
    assert ga1.tobytes() == ga2.tobytes()
    assert gb1.tobytes() == gb2.tobytes()


def test_tape_rejects_double_production():
    x = Tensor(np.ones(2))
    y = Tensor(np.ones(2))
    with Tape() as tape:
        tape.record("op", (x,), y, lambda g: (g,))
        with pytest.raises(ContractViolation):
            tape.record("op", (x,), y, lambda g: (g,))


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert int(np.prod(t.shape)) == t.data.size
    assert t.data.flags["C_CONTIGUOUS"]
    with pytest.raises(ContractViolation):
        t.item()


def test_mul_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a = parameter(rng.standard_normal(5))
    b = Tensor(rng.standard_normal(5))
    with Tape() as tape:
        loss = tensor_sum(elementwise_mul(a, b))
    grads = backward_pass(tape, loss, wrt=[a])

    def f(x):
        with Tape():
            return tensor_sum(elementwise_mul(x, b))

    fd = finite_diff_grad(f, a)
    assert max_rel_error(grads[a].data, fd.data) < 1e-8
