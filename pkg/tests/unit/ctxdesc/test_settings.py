"""Unit tests for the key=value run configuration."""
import os
import sys
import tempfile
import unittest

# Add the src directory to the Python path
src_path = os.path.abspath(os.path.join(os.path.dirname(__file__), '../../../src'))
sys.path.insert(0, src_path)

from ctxdesc.config.settings import RunConfig, SceneSpec, load_run_config, parse_config_text
from ctxdesc.errors import SpecError


class TestParseConfigText(unittest.TestCase):

    def test_comments_and_blank_lines(self):
        """Comments and blank lines are skipped; whitespace around keys is trimmed."""
        text = "# header\n\nbase_lr = 0.01  # inline\nstreams=+geo\n"
        self.assertEqual(parse_config_text(text), {"base_lr": "0.01", "streams": "+geo"})

    def test_malformed_lines(self):
        """Repeated keys, missing '=' and empty keys are errors naming the line."""
        cases = [
            ("repeated", "seed=1\nseed=2\n", "line 2"),
            ("no equals", "seed 1\n", "line 1"),
            ("empty key", "=3\n", "line 1"),
        ]
        for description, text, where in cases:
            with self.subTest(description=description):
                with self.assertRaises(SpecError) as ctx:
                    parse_config_text(text)
                self.assertIn(where, str(ctx.exception))


class TestRunConfig(unittest.TestCase):

    def _load(self, text, overrides=None):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.cfg")
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
            return load_run_config(path, overrides)

    def test_defaults(self):
        """Without a file every key takes its default."""
        config = load_run_config(None)
        self.assertEqual(config.base_lr, 0.05)
        self.assertEqual(config.keypoints_per_pair, 128)
        self.assertEqual(config.streams, "+both")
        self.assertEqual(config.num_keypoints, 256)

    def test_values_and_overrides(self):
        """File values are validated; command-line overrides win."""
        config = self._load("seed=3\ntrain_temperature=false\nmax_steps=10\n", {"seed": 9, "streams": None})
        self.assertEqual(config.seed, 9)
        self.assertFalse(config.train_temperature)
        self.assertEqual(config.max_steps, 10)
        self.assertEqual(config.streams, "+both")

    def test_unknown_key_is_named(self):
        """A misspelled key fails with its name in the message."""
        with self.assertRaises(SpecError) as ctx:
            self._load("baes_lr=0.1\n")
        self.assertIn("baes_lr", str(ctx.exception))

    def test_out_of_range_values(self):
        """Values outside their documented range are rejected."""
        for text in ("momentum=1.0\n", "streams=both\n", "homography_offset=0.5\n", "keypoints_per_pair=3\n"):
            with self.subTest(text=text.strip()):
                with self.assertRaises(SpecError):
                    self._load(text)

    def test_scene_composition(self):
        """Category fractions and ambiguity groups must fit the keypoint count."""
        with self.assertRaises(ValueError):
            SceneSpec(undiscovered_fraction=0.6, unrepeatable_fraction=0.5)
        with self.assertRaises(ValueError):
            SceneSpec(num_keypoints=10, ambiguity_groups=3, group_size=4)
        spec = SceneSpec(num_keypoints=100)
        self.assertEqual((spec.undiscovered_count, spec.unrepeatable_count, spec.matchable_count), (10, 10, 80))

    def test_dump_round_trips(self):
        """The dump lists every key, sorted, and parses back to the same configuration."""
        config = RunConfig(seed=4, use_matchability=False)
        text = config.dump()
        keys = [line.split("=", 1)[0] for line in text.splitlines()]
        self.assertEqual(keys, sorted(RunConfig.model_fields))
        self.assertIn("use_matchability=false", text)
        self.assertEqual(self._load(text), config)

    def test_sub_configs(self):
        """train_config and scene_spec carry the shared keys."""
        config = RunConfig(seed=7, num_scenes=2)
        self.assertEqual(config.train_config().seed, 7)
        self.assertEqual(config.scene_spec().num_scenes, 2)


if __name__ == '__main__':
    unittest.main()
