"""Unit tests for the finite-difference helpers."""
import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose

# Add the src directory to the Python path
src_path = os.path.abspath(os.path.join(os.path.dirname(__file__), '../../../src'))
sys.path.insert(0, src_path)

from ctxdesc.errors import ContractError
from ctxdesc.numerics.gradcheck import finite_diff_gradient, relative_error, sample_indices


class TestFiniteDifferences(unittest.TestCase):

    def test_quadratic_is_exact(self):
        """Central differences are exact (up to roundoff) on a quadratic."""
        a = np.array([[2.0, -1.0], [0.5, 3.0]])
        x = np.array([[1.0, 2.0], [-1.0, 0.5]])
        grad = finite_diff_gradient(lambda v: float(np.sum(a * v * v)), x)
        assert_allclose(grad, 2.0 * a * x, atol=1e-8)

    def test_input_is_not_modified(self):
        """The evaluation point is left untouched."""
        x = np.array([1.0, 2.0, 3.0])
        finite_diff_gradient(lambda v: float(np.sum(v ** 2)), x)
        assert_allclose(x, [1.0, 2.0, 3.0])

    def test_coordinate_subset(self):
        """Only the requested coordinates are differentiated."""
        x = np.array([1.0, 2.0, 3.0])
        grad = finite_diff_gradient(lambda v: float(np.sum(v ** 2)), x, indices=[1])
        assert_allclose(grad, [0.0, 4.0, 0.0], atol=1e-8)

    def test_step_must_be_positive(self):
        """A non-positive step is a contract violation."""
        for h in (0.0, -1e-5):
            with self.subTest(h=h):
                with self.assertRaises(ContractError):
                    finite_diff_gradient(lambda v: 0.0, np.zeros(2), h=h)


class TestRelativeError(unittest.TestCase):

    def test_cases(self):
        """Errors are relative to the larger magnitude, floored."""
        cases = [
            ("identical", [1.0, -2.0], [1.0, -2.0], 0.0),
            ("one percent", [1.0], [0.99], 0.01),
            ("floored near zero", [1e-9], [0.0], 1e-5),
            ("empty", [], [], 0.0),
        ]
        for description, a, b, expected in cases:
            with self.subTest(description=description):
                self.assertAlmostEqual(relative_error(np.array(a), np.array(b)), expected, places=12)

    def test_sample_indices(self):
        """Samples are distinct, sorted and capped; small tensors are fully covered."""
        rng = np.random.default_rng(0)
        idx = sample_indices(100, 10, rng)
        self.assertEqual(len(idx), 10)
        self.assertEqual(len(set(idx.tolist())), 10)
        self.assertTrue(np.all(np.diff(idx) > 0))
        assert_allclose(sample_indices(4, 10, rng), [0, 1, 2, 3])


if __name__ == '__main__':
    unittest.main()
