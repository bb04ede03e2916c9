import json
import os
import tempfile
import unittest
from unittest.mock import patch

from src.config import RunConfig, load_gateway_config, load_run_config
from src.errors import ConfigError
from src.qa_generator import GENERATED_CATEGORIES
from src.spatial_core import DirectionScheme


class TestRunConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, document) -> str:
        path = os.path.join(self.tmp.name, "run.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f)
        return path

    def test_defaults(self):
        config = load_run_config()
        self.assertEqual(config.resolution, 640)
        self.assertEqual((config.tile_w, config.tile_h), (256, 246))
        self.assertEqual(config.categories, [c.value for c in GENERATED_CATEGORIES])
        self.assertEqual(config.distance_metric, "corner")
        self.assertFalse(config.route_augmentation)

    def test_relative_paths_follow_the_config_file(self):
        config = load_run_config(self.write({"scenes": "scenes/*/manifest.json", "output_root": "out"}))
        self.assertEqual(config.scenes, [os.path.join(self.tmp.name, "scenes/*/manifest.json")])
        self.assertEqual(config.output_root, os.path.join(self.tmp.name, "out"))

    def test_scene_globs(self):
        for name in ("b", "a"):
            os.makedirs(os.path.join(self.tmp.name, name))
            open(os.path.join(self.tmp.name, name, "manifest.json"), "w").close()
        config = load_run_config(self.write({"scenes": ["*/manifest.json", "a/manifest.json"]}))
        self.assertEqual(config.scene_paths(), [
            os.path.join(self.tmp.name, "a", "manifest.json"),
            os.path.join(self.tmp.name, "b", "manifest.json"),
        ])

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError):
            load_run_config(self.write({"resolutoin": 512}))
        with self.assertRaises(ConfigError):
            load_run_config(overrides={"colour": "red"})

    def test_overrides_skip_none(self):
        config = load_run_config(self.write({"base_seed": 3}), overrides={"base_seed": None, "workers": 2})
        self.assertEqual(config.base_seed, 3)
        self.assertEqual(config.workers, 2)

    def test_invalid_values(self):
        for bad in ({"resolution": 20, "margin_px": 16}, {"ceiling_keep_fraction": 1.5}, {"n_candidates": 7},
                    {"categories": ["OBJ_ATTRIBUTE"]}, {"categories": ["nope"]}, {"direction_scheme": "SIX_WAY"},
                    {"base_seed": "7"}, {"workers": 0}):
            with self.assertRaises(ConfigError, msg=str(bad)):
                RunConfig(**bad)

    def test_not_json(self):
        path = os.path.join(self.tmp.name, "run.json")
        with open(path, "w") as f:
            f.write("{")
        with self.assertRaises(ConfigError):
            load_run_config(path)

    def test_categories_are_case_insensitive(self):
        self.assertEqual(RunConfig(categories=["count", "Route_Plan"]).categories, ["COUNT", "ROUTE_PLAN"])

    def test_stage_parameters(self):
        config = RunConfig(direction_scheme="QUADRANT", no_filter=True, sample_count=8, ceiling_keep_fraction=0.9)
        self.assertEqual(config.qa_config().direction_scheme, DirectionScheme.QUADRANT)
        self.assertEqual(config.qa_config().ceiling_keep_fraction, 0.9)
        self.assertFalse(config.bundle_options().use_filter)
        self.assertEqual(config.visibility_params().sample_count, 8)

    def test_fingerprint_covers_named_keys_only(self):
        a, b = RunConfig(resolution=512), RunConfig(resolution=512, base_seed=9)
        self.assertEqual(a.fingerprint(["resolution"]), b.fingerprint(["resolution"]))
        self.assertNotEqual(a.fingerprint(["base_seed"]), b.fingerprint(["base_seed"]))


class TestGatewayConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dotenv = os.path.join(self.tmp.name, "missing.env")

    def tearDown(self):
        self.tmp.cleanup()

    def test_key_from_environment(self):
        section = {"endpoint": "http://lmm.local/v1/chat", "model": "m", "api_key_env": "SCENE_TEST_KEY"}
        with patch.dict(os.environ, {"SCENE_TEST_KEY": "abc"}):
            config = load_gateway_config(section, self.dotenv)
        self.assertEqual(config.api_key, "abc")
        self.assertEqual(config.model, "m")

    def test_key_from_dotenv_file(self):
        path = os.path.join(self.tmp.name, ".env")
        with open(path, "w") as f:
            f.write("SCENE_DOTENV_KEY=from-file\n")
        with patch.dict(os.environ, {}, clear=False):
            os.environ.pop("SCENE_DOTENV_KEY", None)
            config = load_gateway_config(
                {"endpoint": "http://x", "model": "m", "api_key_env": "SCENE_DOTENV_KEY"}, path)
        self.assertEqual(config.api_key, "from-file")

    def test_missing_key(self):
        with patch.dict(os.environ, {}, clear=True):
            with self.assertRaises(ConfigError):
                load_gateway_config({"endpoint": "http://x", "model": "m"}, self.dotenv)

    def test_key_in_file_is_rejected(self):
        with self.assertRaises(ConfigError):
            load_gateway_config({"endpoint": "http://x", "model": "m", "api_key": "leak"}, self.dotenv)

    def test_unknown_gateway_key(self):
        with patch.dict(os.environ, {"LMM_API_KEY": "k"}):
            with self.assertRaises(ConfigError):
                load_gateway_config({"endpoint": "http://x", "model": "m", "region": "eu"}, self.dotenv)

    def test_missing_section(self):
        with self.assertRaises(ConfigError):
            load_gateway_config(None)


if __name__ == '__main__':
    unittest.main()
