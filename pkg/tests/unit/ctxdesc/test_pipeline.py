"""Unit tests for model assembly and the description pass."""
import os
import sys
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add the src directory to the Python path
src_path = os.path.abspath(os.path.join(os.path.dirname(__file__), '../../../src'))
sys.path.insert(0, src_path)

from ctxdesc.config.settings import SceneSpec, TrainConfig
from ctxdesc.losses import Streams, aggregate
from ctxdesc.params import TEMPERATURE, ModelParameters
from ctxdesc.pipeline import ContextModel, describe_keypoints, describe_view, init_model, stream_outputs
from ctxdesc.synthetic import gen_scene
from ctxdesc.visual_context import interpolate_regional


class TestInitModel(unittest.TestCase):

    def setUp(self):
        self.cfg = TrainConfig(encoder_width=16, unit_style="original", use_matchability=False)
        self.params = init_model(self.cfg, regional_depth=6, rng=np.random.default_rng(0), vis_hidden=32,
                                 stream_gain=1.0)

    def test_architecture_round_trips_through_meta(self):
        """The loaded model has the shape the parameters were built with."""
        model = ContextModel.from_params(self.params)
        self.assertEqual(model.geo.width, 16)
        self.assertEqual(model.geo.unit_style, "original")
        self.assertFalse(model.geo.use_matchability)
        self.assertEqual(model.vis.regional_dim, 6)
        self.assertEqual(model.vis.hidden, 32)
        self.assertEqual(model.descriptor_dim, 128)

    def test_temperature_starts_at_one(self):
        """alpha is 1 and trainable unless the configuration freezes it."""
        self.assertEqual(self.params.temperature, 1.0)
        self.assertNotIn(TEMPERATURE, self.params.frozen)
        frozen = init_model(TrainConfig(train_temperature=False), 4, np.random.default_rng(0), vis_hidden=8)
        self.assertIn(TEMPERATURE, frozen.frozen)

    def test_same_seed_same_parameters(self):
        """Initialization is a function of the generator state."""
        again = init_model(self.cfg, regional_depth=6, rng=np.random.default_rng(0), vis_hidden=32, stream_gain=1.0)
        self.assertTrue(self.params.equals(again))

    def test_missing_meta_entry(self):
        """A parameter file without architecture entries cannot be loaded as a model."""
        with self.assertRaises(ValueError):
            ContextModel.from_params(ModelParameters())

    def test_saved_model_describes_identically(self):
        """A saved and reloaded model gives bit-identical descriptors."""
        scene = gen_scene(SceneSpec(num_keypoints=32, ambiguity_groups=0, regional_depth=6, seed=3))
        streams = Streams.parse("+both")
        before = describe_view(ContextModel.from_params(self.params), scene.view_a, streams)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.ctxp")
            self.params.save(path)
            after = describe_view(ContextModel.from_params(ModelParameters.load(path)), scene.view_a, streams)
        assert_array_equal(after, before)

    def test_default_model_survives_save_and_load(self):
        """A default-sized fresh model reloads equal to itself."""
        params = init_model(TrainConfig(), 64, np.random.default_rng(0))
        self.assertTrue(ModelParameters.from_bytes(params.to_bytes()).equals(params))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.ctxp")
            params.save(path)
            self.assertTrue(ModelParameters.load(path).equals(params))

    def test_fresh_streams_start_silent(self):
        """With the default gain the final stream projections are zero and +both returns the raw rows."""
        params = init_model(TrainConfig(encoder_width=16), 5, np.random.default_rng(2), vis_hidden=16)
        model = ContextModel.from_params(params)
        for name in stream_outputs(model):
            with self.subTest(name=name):
                self.assertFalse(np.any(params.tensor(name).data))
        scene = gen_scene(SceneSpec(num_keypoints=32, ambiguity_groups=2, regional_depth=5, seed=4))
        out = describe_view(model, scene.view_a, Streams.parse("+both"))
        assert_allclose(out, scene.view_a.descriptors, atol=1e-6)


class TestDescribe(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.scene = gen_scene(SceneSpec(num_keypoints=40, ambiguity_groups=2, regional_depth=5, seed=9))
        cfg = TrainConfig(encoder_width=16)
        cls.model = ContextModel.from_params(init_model(cfg, 5, np.random.default_rng(1), vis_hidden=16,
                                                        stream_gain=1.0))

    def test_raw_stream_passes_descriptors_through(self):
        """With no context stream the output equals the input bit-for-bit."""
        out = describe_view(self.model, self.scene.view_a, Streams.parse("raw"))
        assert_array_equal(out, self.scene.view_a.descriptors)

    def test_outputs_are_unit_rows(self):
        """Every augmented stream yields K x 128 unit rows."""
        for text in ("+geo", "+vis", "+both"):
            with self.subTest(streams=text):
                out = describe_view(self.model, self.scene.view_a, Streams.parse(text))
                self.assertEqual(out.shape, (40, 128))
                assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_geo_stream_equals_manual_composition(self):
        """+geo is the normalized sum of the raw descriptor and the encoder output."""
        view = self.scene.view_a
        model = self.model
        scores = model.head.raw(model.params, view.descriptors)
        geo = model.geo(model.params, view.normalized(), scores.tanh())
        expected = aggregate(view.descriptors, geo, None, Streams.parse("+geo")).data
        assert_allclose(describe_view(model, view, Streams.parse("+geo")), expected, atol=1e-12)

    def test_visual_stream_samples_the_grid(self):
        """+vis feeds interpolated regional features at the pixel positions."""
        view = self.scene.view_a
        model = self.model
        regional = interpolate_regional(view.grid, view.keypoints, k=model.interp_k)
        vis = model.vis(model.params, regional, view.descriptors)
        expected = aggregate(view.descriptors, None, vis, Streams.parse("+vis")).data
        assert_allclose(describe_view(model, view, Streams.parse("+vis")), expected, atol=1e-12)

    def test_training_mode_records_statistics(self):
        """A training pass records BN statistics of the geometric encoder."""
        view = self.scene.view_b
        ctx = self.model.context(training=True)
        describe_keypoints(self.model, view.normalized(), view.keypoints, view.descriptors, view.grid,
                           Streams.parse("+both"), ctx)
        keys = {key for key, _, _ in ctx.batch_stats}
        self.assertIn("geo.tail.bn", keys)


if __name__ == '__main__':
    unittest.main()
