"""Unit tests for regional grids, inverse-distance interpolation and the visual encoder."""
import os
import sys
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add the src directory to the Python path
src_path = os.path.abspath(os.path.join(os.path.dirname(__file__), '../../../src'))
sys.path.insert(0, src_path)

from ctxdesc.errors import DimensionError, EmptyInputError, FormatError
from ctxdesc.params import ModelParameters
from ctxdesc.visual_context import RegionalGrid, VisEncoder, encode_visual, interpolate_regional


def brute_force_idw(features, stride, point, k):
    """Loop over every cell, sort by distance, weight the k nearest by 1/d."""
    gh, gw, _ = features.shape
    cells = []
    for r in range(gh):
        for c in range(gw):
            center = np.array([(c + 0.5) * stride, (r + 0.5) * stride])
            cells.append((np.linalg.norm(point - center), r * gw + c, features[r, c]))
    cells.sort(key=lambda item: (item[0], item[1]))
    if cells[0][0] < 1e-9:
        return cells[0][2]
    weights = np.array([1.0 / d for d, _, _ in cells[:k]])
    values = np.array([f for _, _, f in cells[:k]])
    return weights @ values / weights.sum()


class TestInterpolation(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.grid = RegionalGrid(self.rng.normal(size=(4, 4, 5)), stride=8.0)

    def test_matches_brute_force(self):
        """Vectorized interpolation equals the loop oracle on a 4x4 grid."""
        points = self.rng.uniform(0.0, 32.0, size=(25, 2))
        out = interpolate_regional(self.grid, points, k=3)
        for i, p in enumerate(points):
            with self.subTest(point=i):
                assert_allclose(out[i], brute_force_idw(self.grid.features, 8.0, p, 3), atol=1e-12)

    def test_exact_hit_returns_cell_feature(self):
        """A query on an anchor takes that cell's feature exactly."""
        out = interpolate_regional(self.grid, np.array([[12.0, 20.0]]))
        assert_array_equal(out[0], self.grid.features[2, 1])

    def test_k_one_is_nearest_cell(self):
        """With k = 1 every query copies its nearest cell."""
        out = interpolate_regional(self.grid, np.array([[1.0, 2.0], [30.0, 17.0]]), k=1)
        assert_array_equal(out, self.grid.features[[0, 2], [0, 3]])

    def test_continuous_across_the_exact_hit_threshold(self):
        """A query 1e-8 px from an anchor lands next to that cell's feature."""
        anchor = np.array([12.0, 20.0])
        near = interpolate_regional(self.grid, (anchor + [1e-8, 0.0])[None, :])
        assert_allclose(near[0], self.grid.features[2, 1], rtol=0, atol=1e-6)
        on = interpolate_regional(self.grid, (anchor + [1e-10, 0.0])[None, :])
        assert_allclose(near, on, rtol=0, atol=1e-6)

    def test_chunking_does_not_change_results(self):
        """Processing queries in blocks gives the same values."""
        points = self.rng.uniform(0.0, 32.0, size=(17, 2))
        assert_array_equal(interpolate_regional(self.grid, points, chunk_size=4),
                           interpolate_regional(self.grid, points))

    def test_output_is_inside_feature_range(self):
        """A convex combination never leaves the per-channel range."""
        out = interpolate_regional(self.grid, self.rng.uniform(-10.0, 42.0, size=(30, 2)), k=16)
        cells = self.grid.cells()
        self.assertTrue(np.all(out <= cells.max(axis=0) + 1e-12))
        self.assertTrue(np.all(out >= cells.min(axis=0) - 1e-12))

    def test_neighbor_count_bounds(self):
        """k must lie in [1, gh * gw]."""
        for k in (0, 17):
            with self.subTest(k=k):
                with self.assertRaises(ValueError):
                    interpolate_regional(self.grid, np.zeros((1, 2)), k=k)

    def test_single_cell_grid(self):
        """A 1x1 grid returns its only feature everywhere."""
        grid = RegionalGrid(np.full((1, 1, 3), 2.5), stride=4.0)
        assert_allclose(interpolate_regional(grid, np.array([[0.0, 0.0], [9.0, 9.0]]), k=1), 2.5)


class TestRegionalGrid(unittest.TestCase):

    def test_anchor_layout(self):
        """Anchors are cell centers in row-major order."""
        grid = RegionalGrid(np.zeros((2, 3, 1)), stride=10.0)
        assert_allclose(grid.anchors(), [[5, 5], [15, 5], [25, 5], [5, 15], [15, 15], [25, 15]])

    def test_validation(self):
        """Empty grids, non-finite values and bad strides are rejected."""
        with self.assertRaises(EmptyInputError):
            RegionalGrid(np.zeros((0, 2, 3)), stride=1.0)
        with self.assertRaises(ValueError):
            RegionalGrid(np.full((1, 1, 1), np.nan), stride=1.0)
        with self.assertRaises(ValueError):
            RegionalGrid(np.zeros((1, 1, 1)), stride=0.0)

    def test_file_round_trip(self):
        """CTXG files store f32 values; a second save is byte-identical."""
        grid = RegionalGrid(np.random.default_rng(1).normal(size=(3, 2, 4)), stride=16.0)
        with tempfile.TemporaryDirectory() as tmp:
            first = os.path.join(tmp, "a.ctxg")
            second = os.path.join(tmp, "b.ctxg")
            grid.save(first)
            loaded = RegionalGrid.load(first)
            loaded.save(second)
            self.assertEqual(loaded.stride, 16.0)
            assert_allclose(loaded.features, grid.features, atol=1e-6)
            with open(first, "rb") as f1, open(second, "rb") as f2:
                self.assertEqual(f1.read(), f2.read())

    def test_bad_magic(self):
        """A file without the CTXG magic is rejected."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.ctxg")
            with open(path, "wb") as f:
                f.write(b"NOPE" + bytes(16))
            with self.assertRaises(FormatError):
                RegionalGrid.load(path)


class TestVisEncoder(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.enc = VisEncoder(regional_dim=6, local_dim=128, hidden=32)
        self.store = ModelParameters()
        self.enc.init(self.store, self.rng)

    def test_output_shape(self):
        """Regional K x d plus local K x 128 become K x 128."""
        out = encode_visual(self.enc, self.store, self.rng.normal(size=(7, 6)), self.rng.normal(size=(7, 128)))
        self.assertEqual(out.shape, (7, 128))

    def test_fusion_widths(self):
        """Fusion runs 256 -> 256 -> 128."""
        self.assertEqual(self.store.tensor("vis.fuse.0.weight").shape, (256, 256))
        self.assertEqual(self.store.tensor("vis.fuse.1.weight").shape, (256, 128))

    def test_row_mismatch(self):
        """Regional and local inputs must have the same number of rows."""
        with self.assertRaises(DimensionError):
            self.enc(self.store, np.zeros((3, 6)), np.zeros((4, 128)))

    def test_wrong_regional_depth(self):
        """The reduction expects exactly regional_dim columns."""
        with self.assertRaises(DimensionError):
            self.enc(self.store, np.zeros((3, 5)), np.zeros((3, 128)))

    def _straight_line(self, regional, local):
        def affine(name, x):
            return x @ self.store.tensor(f"{name}.weight").data + self.store.tensor(f"{name}.bias").data

        def cn(x):
            return (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) + 1e-6)

        reduced = cn(affine("vis.reduce.1", np.maximum(cn(affine("vis.reduce.0", regional)), 0.0)))
        fused = np.maximum(affine("vis.fuse.0", np.hstack([reduced, local])), 0.0)
        return affine("vis.fuse.1", fused)

    def test_six_keypoints_against_straight_line_numpy(self):
        """K = 6 output equals the hand-written reduce and fuse pass."""
        regional = self.rng.normal(size=(6, 6))
        local = self.rng.normal(size=(6, 128))
        assert_allclose(encode_visual(self.enc, self.store, regional, local).data,
                        self._straight_line(regional, local), rtol=0, atol=1e-10)

    def test_permutation_equivariance(self):
        """Permuting keypoints permutes the output rows."""
        regional = self.rng.normal(size=(9, 6))
        local = self.rng.normal(size=(9, 128))
        perm = self.rng.permutation(9)
        out = encode_visual(self.enc, self.store, regional, local).data
        permuted = encode_visual(self.enc, self.store, regional[perm], local[perm]).data
        assert_allclose(permuted, out[perm], atol=1e-12)

    def test_single_keypoint_reduces_to_zero_context(self):
        """With K = 1 the normalized reduction is zero, so only the local descriptor reaches the fusion."""
        regional = self.rng.normal(size=(1, 6))
        local = self.rng.normal(size=(1, 128))
        out = encode_visual(self.enc, self.store, regional, local).data
        self.assertTrue(np.all(np.isfinite(out)))
        assert_allclose(out, self._straight_line(regional, local), rtol=0, atol=1e-12)
        other = encode_visual(self.enc, self.store, self.rng.normal(size=(1, 6)), local).data
        assert_array_equal(other, out)


if __name__ == '__main__':
    unittest.main()
