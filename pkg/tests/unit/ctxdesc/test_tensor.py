"""Unit tests for the reverse-mode differentiation engine."""
import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose

# Add the src directory to the Python path
src_path = os.path.abspath(os.path.join(os.path.dirname(__file__), '../../../src'))
sys.path.insert(0, src_path)

from ctxdesc.errors import ContractError, DimensionError
from ctxdesc.numerics.gradcheck import finite_diff_gradient, relative_error
from ctxdesc.numerics.tensor import (
    Tensor,
    backward,
    concat,
    corrupt_gradient,
    parameter,
    record_kinks,
    same_pattern,
)


def numeric_grad(fn, value):
    """Central-difference gradient of fn(Tensor) -> scalar Tensor at ``value``."""
    return finite_diff_gradient(lambda x: fn(Tensor(x)).item(), value)


class TestPrimitiveGradients(unittest.TestCase):
    """Every primitive against central differences."""

    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.x = self.rng.uniform(0.5, 1.5, size=(3, 4))
        self.w = self.rng.normal(size=(3, 4))

    def test_unary_ops(self):
        """Elementwise ops, reductions and softmax match finite differences."""
        cases = [
            ("neg", lambda t: -t),
            ("pow", lambda t: t ** 3),
            ("relu", lambda t: (t - 1.0).relu()),
            ("tanh", lambda t: t.tanh()),
            ("exp", lambda t: t.exp()),
            ("log", lambda t: t.log()),
            ("sqrt", lambda t: t.sqrt()),
            ("clip", lambda t: t.clip(0.8, 1.2)),
            ("softmax_rows", lambda t: t.softmax(axis=1)),
            ("softmax_cols", lambda t: t.softmax(axis=0)),
            ("rdiv", lambda t: 2.0 / t),
            ("rsub", lambda t: 1.0 - t),
            ("transpose", lambda t: t.T.T),
        ]
        for name, op in cases:
            with self.subTest(op=name):
                def loss(t, op=op):
                    return (op(t) * self.w).sum()

                x = parameter(self.x)
                backward(loss(x))
                self.assertLess(relative_error(x.grad, numeric_grad(loss, self.x)), 1e-5)

    def test_binary_ops_with_broadcasting(self):
        """Row and scalar operands receive gradients summed over the broadcast axes."""
        row = self.rng.normal(size=(1, 4))
        scalar = np.array([[1.7]])
        for name, other in (("row", row), ("scalar", scalar)):
            for op_name, op in (("add", lambda a, b: a + b), ("sub", lambda a, b: a - b),
                                ("mul", lambda a, b: a * b), ("div", lambda a, b: a / b)):
                with self.subTest(operand=name, op=op_name):
                    a = parameter(self.x)
                    b = parameter(other + 2.0)
                    backward((op(a, b) * self.w).sum())
                    expected_b = numeric_grad(lambda t: (op(Tensor(self.x), t) * self.w).sum(), other + 2.0)
                    self.assertEqual(b.grad.shape, other.shape)
                    self.assertLess(relative_error(b.grad, expected_b), 1e-5)

    def test_matmul_and_indexing(self):
        """matmul, take_rows (with repeats), gather, sum and mean."""
        m = self.rng.normal(size=(4, 2))
        idx = np.array([2, 0, 2])
        cases = [
            ("matmul", lambda t: (t @ m).sum()),
            ("take_rows", lambda t: (t.take_rows(idx) * self.w[:3]).sum()),
            ("gather", lambda t: (t.gather([0, 1, 2], [3, 1, 3]) * np.array([[1.0, -2.0, 0.5]])).sum()),
            ("sum_axis0", lambda t: (t.sum(axis=0) * self.w[:1]).sum()),
            ("mean_axis1", lambda t: (t.mean(axis=1) * self.w[:, :1]).sum()),
        ]
        for name, loss in cases:
            with self.subTest(op=name):
                x = parameter(self.x)
                backward(loss(x))
                self.assertLess(relative_error(x.grad, numeric_grad(loss, self.x)), 1e-5)

    def test_concat_routes_gradients(self):
        """Column concatenation hands each operand its own slice of the gradient."""
        a = parameter(self.x[:, :1])
        b = parameter(self.x[:, 1:])
        backward((concat([a, b], axis=1) * self.w).sum())
        assert_allclose(a.grad, self.w[:, :1])
        assert_allclose(b.grad, self.w[:, 1:])


class TestEdgeCases(unittest.TestCase):
    """Degenerate points and contract checks."""

    def test_backward_needs_scalar_root(self):
        """A non-scalar root is rejected."""
        with self.assertRaises(ContractError):
            backward(parameter(np.ones((2, 2))) * 2.0)

    def test_matmul_shape_mismatch(self):
        """Incompatible inner dimensions raise DimensionError."""
        with self.assertRaises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_sqrt_at_zero_has_zero_gradient(self):
        """sqrt(0) contributes no gradient instead of infinity."""
        x = parameter(np.array([[0.0, 4.0]]))
        backward(x.sqrt().sum())
        assert_allclose(x.grad, [[0.0, 0.25]])

    def test_log_floor_blocks_gradient(self):
        """Arguments at or below the floor are clamped and get no gradient."""
        x = parameter(np.array([[0.0, 2.0]]))
        out = x.log(floor=1e-30)
        backward(out.sum())
        self.assertTrue(np.isfinite(out.data).all())
        assert_allclose(x.grad, [[0.0, 0.5]])

    def test_clip_boundaries_have_no_gradient(self):
        """Only strictly interior entries pass gradient through clip."""
        x = parameter(np.array([[0.0, 1.0, 2.0, 3.0]]))
        backward(x.clip(0.0, 2.0).sum())
        assert_allclose(x.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_repeated_backward_is_stable(self):
        """Calling backward twice on one graph gives identical gradients."""
        x = parameter(np.array([[1.0, 2.0]]))
        loss = (x * x).sum()
        first = backward(loss)
        x_grad = x.grad.copy()
        backward(loss)
        assert_allclose(x.grad, x_grad)
        self.assertEqual(first, {})

    def test_named_leaves_are_returned(self):
        """backward returns gradients keyed by parameter name."""
        w = parameter(np.array([[3.0]]), name="w")
        grads = backward((w * w).sum())
        assert_allclose(grads["w"], [[6.0]])

    def test_constants_do_not_track(self):
        """Operations on constants record no graph."""
        out = Tensor(np.ones((2, 2))) * 3.0
        self.assertFalse(out.requires_grad)


class TestFaultInjection(unittest.TestCase):

    def test_corrupted_rule_changes_gradient(self):
        """A corrupted relu rule scales its gradient and is restored afterwards."""
        x = parameter(np.array([[1.0, 2.0]]))
        with corrupt_gradient("relu", 2.0):
            backward(x.relu().sum())
            assert_allclose(x.grad, [[2.0, 2.0]])
        backward(x.relu().sum())
        assert_allclose(x.grad, [[1.0, 1.0]])

    def test_kink_patterns(self):
        """Patterns differ exactly when a relu input changes sign."""
        with record_kinks() as first:
            Tensor(np.array([[1.0, -1.0]])).relu()
        with record_kinks() as second:
            Tensor(np.array([[2.0, -3.0]])).relu()
        with record_kinks() as third:
            Tensor(np.array([[2.0, 3.0]])).relu()
        self.assertTrue(same_pattern(first, second))
        self.assertFalse(same_pattern(first, third))


if __name__ == '__main__':
    unittest.main()
