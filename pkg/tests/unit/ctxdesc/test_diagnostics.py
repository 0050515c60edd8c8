"""Unit tests for the component-wise gradient check."""
import os
import sys
import unittest

import numpy as np

# Add the src directory to the Python path
src_path = os.path.abspath(os.path.join(os.path.dirname(__file__), '../../../src'))
sys.path.insert(0, src_path)

from ctxdesc.diagnostics import (
    COMPONENTS,
    GradcheckRow,
    check_component,
    format_table,
    injected_fault,
    run_gradcheck,
    sweep_steps,
)
from ctxdesc.numerics.tensor import parameter


class TestGradcheck(unittest.TestCase):

    def test_every_component_passes(self):
        """All components agree with finite differences for several seeds."""
        for seed in (0, 1, 2):
            rows = run_gradcheck(seed)
            self.assertEqual([r.component for r in rows], list(COMPONENTS))
            for row in rows:
                with self.subTest(seed=seed, component=row.component):
                    self.assertTrue(row.passed, row.line())
                    self.assertGreater(row.checked, 0)

    def test_injected_fault_is_detected(self):
        """A wrong relu rule makes the components that use relu fail."""
        with injected_fault("relu", 1.5):
            rows = {r.component: r for r in run_gradcheck(0)}
        self.assertFalse(rows["matchability"].passed)
        self.assertFalse(rows["total_loss"].passed)
        self.assertTrue(rows["aggregate"].passed)
        self.assertTrue(all(r.passed for r in run_gradcheck(0)))

    def test_smooth_function_has_no_skips(self):
        """A kink-free function is checked at every sampled coordinate."""
        x = parameter(np.random.default_rng(0).normal(size=(3, 3)))
        row = check_component("cube", lambda: (x * x * x).sum(), [x], np.random.default_rng(1))
        self.assertEqual(row.skipped, 0)
        self.assertEqual(row.checked, 6)
        self.assertTrue(row.passed)

    def test_step_sweep_and_table(self):
        """The sweep reports one error per step; the table has a row per component."""
        sweep = sweep_steps(0, steps=(1e-5, 1e-6))
        self.assertEqual([h for h, _ in sweep], [1e-5, 1e-6])
        self.assertTrue(all(np.isfinite(e) for _, e in sweep))
        table = format_table(run_gradcheck(0))
        self.assertEqual(len(table.splitlines()), len(COMPONENTS) + 1)
        self.assertNotIn("FAIL", table)

    def test_row_without_checked_coordinates_fails(self):
        """A component where every coordinate was skipped does not pass."""
        self.assertFalse(GradcheckRow(component="x", max_error=0.0, checked=0, skipped=6).passed)


if __name__ == '__main__':
    unittest.main()
