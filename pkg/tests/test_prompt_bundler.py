import json
import os
import tempfile
import unittest

import numpy as np
from PIL import Image

from src.bev_renderer import heading_rotation, load_canvas, remove_ceiling, render_bev
from src.errors import MissingArtifact, UnknownMarkId, ValidationError
from src.prompt_bundler import (
    GUIDE_PROMPT_VERSION,
    REL_DIRECTION_GUIDE,
    THINK_THEN_ANSWER_INSTRUCTION,
    AnswerFormat,
    BundleOptions,
    ImageRole,
    PromptBundle,
    SceneArtifacts,
    assemble_bundle,
    build_metadata_text,
    format_question,
    read_bundle_index,
    write_bundle,
    write_bundle_index,
)
from src.qa_generator import AnswerKind, QACategory, QAGenerator, QAItem
from src.spatial_core import Heading2D
from tests.helpers import furnished_scene, make_object, room_cloud


class TestMetadataText(unittest.TestCase):
    def test_format(self):
        objects = [
            make_object(2, "table", (3.0, 2.5, 0.375)),
            make_object(1, "sofa", (1.2, -0.001, 0.4)),
        ]
        self.assertEqual(build_metadata_text(objects), (
            "mark 1: sofa, center=(1.20, 0.00, 0.40) m\n"
            "mark 2: table, center=(3.00, 2.50, 0.38) m"
        ))
        self.assertEqual(build_metadata_text(objects, [2]), "mark 2: table, center=(3.00, 2.50, 0.38) m")

    def test_unknown_filter_id(self):
        with self.assertRaises(UnknownMarkId):
            build_metadata_text([make_object(1, "sofa", (0, 0, 0))], [1, 4])


class TestQuestionFormatting(unittest.TestCase):
    def test_choice_options_are_lettered(self):
        item = QAItem("q", "s", QACategory.REL_DISTANCE, "Which is closest?", AnswerKind.CHOICE,
                      choices=["lamp", "tv", "sink"], correct_choice=1)
        self.assertEqual(format_question(item), "Which is closest?\nOptions:\nA. lamp\nB. tv\nC. sink")

    def test_numeric_question_unchanged(self):
        item = QAItem("q", "s", QACategory.COUNT, "How many?", AnswerKind.NUMERIC, numeric_answer=2.0)
        self.assertEqual(format_question(item), "How many?")


class TestPromptBundle(unittest.TestCase):
    def bundle(self, images):
        return PromptBundle(
            qa_id="q", category=QACategory.COUNT, images=images, metadata_text="", guide_text=None,
            question_text="?", answer_format=AnswerFormat.SHORT_ANSWER, answer_instruction="",
        )

    def test_exactly_one_bev(self):
        self.bundle([(ImageRole.BEV, "a.png"), (ImageRole.KEYFRAME_GRID, "g.png")])
        with self.assertRaises(ValidationError):
            self.bundle([(ImageRole.KEYFRAME_GRID, "g.png")])
        with self.assertRaises(ValidationError):
            self.bundle([(ImageRole.BEV, "a.png"), (ImageRole.BEV, "b.png")])


class TestAssembleBundle(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name
        self.scene = furnished_scene()
        cloud = remove_ceiling(room_cloud())
        self.artifacts = SceneArtifacts(
            scene=self.scene,
            base_canvas=render_bev(cloud, resolution=160),
            cloud=cloud,
        )
        self.generator = QAGenerator(self.scene)

    def tearDown(self):
        self.tmp.cleanup()

    def write_keyframes(self):
        keyframe_dir = os.path.join(self.out, "keyframes")
        os.makedirs(keyframe_dir)
        for index in (4, 9):
            Image.fromarray(np.full((48, 64, 3), (40 * index) % 256, dtype=np.uint8)).save(
                os.path.join(keyframe_dir, f"frame_{index:06d}.png"))
        self.artifacts.keyframe_dir = keyframe_dir
        self.artifacts.keyframe_index = {
            "keyframes": [{"frame_index": 4, "covered": [1, 2]}, {"frame_index": 9, "covered": [5]}],
            "uncovered": [],
        }

    def test_filtered_bev_and_metadata(self):
        item = self.generator.gen_relative_distance(0)
        bundle = assemble_bundle(item, self.artifacts, self.out)
        self.assertEqual(bundle.transform_sidecar["marks"], sorted(item.involved_marks))
        self.assertEqual(len(bundle.metadata_text.splitlines()), len(item.involved_marks))
        self.assertEqual(bundle.answer_format, AnswerFormat.SHORT_ANSWER)
        self.assertIsNone(bundle.guide_text)
        self.assertEqual(bundle.image_paths(ImageRole.KEYFRAME_GRID), [])
        self.assertTrue(os.path.isfile(bundle.image_paths(ImageRole.BEV)[0]))

    def test_unfiltered_bev_shows_every_mark(self):
        item = self.generator.gen_relative_distance(0)
        bundle = assemble_bundle(item, self.artifacts, self.out, BundleOptions(use_filter=False))
        self.assertEqual(bundle.transform_sidecar["marks"], list(range(1, 11)))
        self.assertEqual(len(bundle.metadata_text.splitlines()), 10)

    def test_metadata_can_be_dropped(self):
        item = self.generator.gen_count("chair", 0)
        bundle = assemble_bundle(item, self.artifacts, self.out, BundleOptions(use_metadata=False))
        self.assertEqual(bundle.metadata_text, "")

    def test_relative_direction_view_is_rotated(self):
        item = self.generator.gen_relative_direction(2)
        bundle = assemble_bundle(item, self.artifacts, self.out)
        standing = self.scene.object_by_id(item.involved_marks[0])
        facing = self.scene.object_by_id(item.involved_marks[1])
        expected = heading_rotation(Heading2D.from_points(standing.obb.center[:2], facing.obb.center[:2]))
        self.assertAlmostEqual(bundle.transform_sidecar["rotation_deg"], expected)

        canvas = load_canvas(bundle.image_paths(ImageRole.BEV)[0])
        (su, sv), (fu, fv) = canvas.marks[standing.mark_id], canvas.marks[facing.mark_id]
        self.assertAlmostEqual(su, fu, places=6)
        self.assertLess(fv, sv)

        self.assertEqual(bundle.guide_text, REL_DIRECTION_GUIDE)
        self.assertEqual(bundle.answer_format, AnswerFormat.THINK_THEN_ANSWER)
        self.assertEqual(bundle.answer_instruction, THINK_THEN_ANSWER_INSTRUCTION)

    def test_rotation_and_guide_ablations(self):
        item = self.generator.gen_relative_direction(2)
        bundle = assemble_bundle(item, self.artifacts, self.out, BundleOptions(use_rotation=False, use_guide=False))
        self.assertEqual(bundle.transform_sidecar["rotation_deg"], 0.0)
        self.assertIsNone(bundle.guide_text)

    def test_rotation_needs_cloud(self):
        self.artifacts.cloud = None
        with self.assertRaises(MissingArtifact):
            assemble_bundle(self.generator.gen_relative_direction(2), self.artifacts, self.out)

    def test_missing_bev(self):
        self.artifacts.base_canvas = None
        with self.assertRaises(MissingArtifact):
            assemble_bundle(self.generator.gen_count("chair", 0), self.artifacts, self.out)

    def test_non_spatial_items_get_keyframe_grids(self):
        item = QAItem("scene0000-obj_attribute-ext0001", "scene0000", QACategory.OBJ_ATTRIBUTE,
                      "What color is the sofa [1]?", AnswerKind.TEXT, text_answer="blue", involved_marks=[1])
        with self.assertRaises(MissingArtifact):
            assemble_bundle(item, self.artifacts, self.out)

        self.write_keyframes()
        bundle = assemble_bundle(item, self.artifacts, self.out, BundleOptions(tile_w=32, tile_h=20))
        grids = bundle.image_paths(ImageRole.KEYFRAME_GRID)
        self.assertEqual(len(grids), 1)
        with Image.open(grids[0]) as grid:
            self.assertEqual(grid.size, (64, 20))
        self.assertEqual(bundle.images[0][0], ImageRole.BEV)

    def test_spatial_keyframes_on_request(self):
        self.write_keyframes()
        item = self.generator.gen_count("chair", 0)
        plain = assemble_bundle(item, self.artifacts, self.out)
        self.assertEqual(len(plain.images), 1)
        with_frames = assemble_bundle(item, self.artifacts, self.out, BundleOptions(keyframes_for_spatial=True))
        # Neither keyframe covers a chair
        self.assertEqual(len(with_frames.images), 1)

    def test_write_and_read_index(self):
        items = self.generator.generate_items(QACategory.REL_DIRECTION, 3)
        bundle_dir = os.path.join(self.out, "bundle")
        paths = [write_bundle(assemble_bundle(i, self.artifacts, bundle_dir), bundle_dir) for i in items]
        index_path = write_bundle_index(paths, os.path.join(bundle_dir, "index.json"))
        with open(index_path) as f:
            index = json.load(f)
        self.assertEqual(index["guide_version"], GUIDE_PROMPT_VERSION)
        self.assertEqual([e["qa_id"] for e in index["bundles"]], [i.qa_id for i in items])

        with open(paths[0]) as f:
            document = json.load(f)
        self.assertEqual(document["images"][0]["path"], f"{items[0].qa_id}_bev.png")

        bundles = read_bundle_index(index_path)
        self.assertEqual([b.qa_id for b in bundles], [i.qa_id for i in items])
        self.assertTrue(all(os.path.isfile(b.image_paths(ImageRole.BEV)[0]) for b in bundles))


if __name__ == '__main__':
    unittest.main()
