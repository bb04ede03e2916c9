import json
import math
import os
import tempfile
import unittest
from dataclasses import replace

import numpy as np

from src.errors import (
    EmptyCloud,
    LabelAbsent,
    NoValidPair,
    NoValidRoute,
    NoValidTriplet,
    ParseError,
    TooFewCandidates,
    UnknownMarkId,
    ValidationError,
)
from src.qa_generator import (
    ROUTE_CHOICES,
    AnswerKind,
    QACategory,
    QAConfig,
    QAGenerator,
    QAItem,
    RouteAction,
    RouteSpec,
    derive_seed,
    emit_augmentation_stub,
    ground_marks,
    import_external_items,
    mark_ref,
    occupied_floor_area,
    read_shard,
    whole_centimeters,
    write_shard,
)
from src.scene_ingest import ObjectInstance, OrientedBox, PointCloud
from src.spatial_core import DirectionScheme, direction_bin, footprint_polygon, obb_corners, segment_clearance, signed_angle
from tests.helpers import furnished_scene, make_object, make_scene


def rotate_scene(scene, degrees: float, pivot=(3.0, 2.5)):
    """Rotate every object about a vertical axis through pivot"""
    t = math.radians(degrees)
    rz = np.array([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0], [0.0, 0.0, 1.0]])
    pivot = np.array([pivot[0], pivot[1], 0.0])
    objects = []
    for obj in scene.objects:
        center = rz @ (obj.obb.center_array - pivot) + pivot
        rotation = rz @ obj.obb.rotation_matrix
        box = OrientedBox(
            center=tuple(float(v) for v in center),
            extents=obj.obb.extents,
            rotation=tuple(tuple(float(v) for v in row) for row in rotation),
        )
        objects.append(ObjectInstance(obj.mark_id, obj.label, box))
    return replace(scene, objects=tuple(objects))


def xy(obj):
    return np.array(obj.obb.center[:2])


class TestQAItem(unittest.TestCase):
    def test_numeric_item_rejects_choices(self):
        with self.assertRaises(ValidationError):
            QAItem("q", "s", QACategory.COUNT, "?", AnswerKind.NUMERIC, numeric_answer=2.0, choices=["a"])

    def test_numeric_answer_must_be_non_negative(self):
        with self.assertRaises(ValidationError):
            QAItem("q", "s", QACategory.COUNT, "?", AnswerKind.NUMERIC, numeric_answer=-1.0)

    def test_choice_index_in_range(self):
        with self.assertRaises(ValidationError):
            QAItem("q", "s", QACategory.REL_DIRECTION, "?", AnswerKind.CHOICE, choices=["a", "b"], correct_choice=2)

    def test_text_item(self):
        item = QAItem("q", "s", QACategory.OBJ_ATTRIBUTE, "?", AnswerKind.TEXT, text_answer="red")
        self.assertEqual(item.gold_text(), "red")
        with self.assertRaises(ValidationError):
            QAItem("q", "s", QACategory.OBJ_ATTRIBUTE, "?", AnswerKind.TEXT)

    def test_gold_text_formats_numbers(self):
        item = QAItem("q", "s", QACategory.ABS_DISTANCE, "?", AnswerKind.NUMERIC, numeric_answer=1.5, unit="m")
        self.assertEqual(item.gold_text(), "1.5 m")
        count = QAItem("q", "s", QACategory.COUNT, "?", AnswerKind.NUMERIC, numeric_answer=3.0)
        self.assertEqual(count.gold_text(), "3")

    def test_from_dict_errors(self):
        with self.assertRaises(ParseError):
            QAItem.from_dict({"qa_id": "x"})
        with self.assertRaises(ParseError):
            QAItem.from_dict({
                "qa_id": "x", "scene_id": "s", "category": "NOPE", "question": "?", "answer_kind": "TEXT",
                "text_answer": "a",
            })

    def test_check_marks(self):
        scene = furnished_scene()
        item = QAItem("q", scene.scene_id, QACategory.OBJ_SIZE, "?", AnswerKind.NUMERIC, numeric_answer=1.0,
                      involved_marks=[1, 77])
        with self.assertRaises(UnknownMarkId):
            item.check_marks(scene)


class TestSeeds(unittest.TestCase):
    def test_derive_seed_is_stable_and_distinct(self):
        a = derive_seed("scene0000", QACategory.COUNT, 0, 7)
        self.assertEqual(a, derive_seed("scene0000", "COUNT", 0, 7))
        self.assertLess(a, 2 ** 64)
        others = {derive_seed("scene0000", QACategory.COUNT, i, 7) for i in range(1, 50)}
        self.assertNotIn(a, others)
        self.assertNotEqual(a, derive_seed("scene0000", QACategory.COUNT, 0, 8))
        self.assertNotEqual(a, derive_seed("scene0001", QACategory.COUNT, 0, 7))


class TestCountAndSizes(unittest.TestCase):
    def setUp(self):
        self.scene = furnished_scene()
        self.generator = QAGenerator(self.scene)

    def test_count(self):
        item = self.generator.gen_count("chair", 1)
        self.assertEqual(item.numeric_answer, 2.0)
        self.assertEqual(item.involved_marks, [3, 4])
        self.assertEqual(item.question, "How many chair(s) are there in this room?")

    def test_count_absent_label(self):
        with self.assertRaises(LabelAbsent):
            self.generator.gen_count("piano", 1)

    def test_stoplisted_labels_are_not_counted(self):
        scene = make_scene(list(self.scene.objects) + [make_object(11, "wall", (0, 0, 1))])
        generator = QAGenerator(scene)
        self.assertNotIn("wall", generator.countable_labels())
        self.assertNotIn(11, [o.mark_id for o in generator.unambiguous_objects()])

    def test_unambiguous_objects_skip_duplicates(self):
        ids = [o.mark_id for o in self.generator.unambiguous_objects()]
        self.assertEqual(ids, [1, 2, 5, 6, 7, 8, 9, 10])

    def test_object_size_in_centimeters(self):
        for seed in range(20):
            item = self.generator.gen_object_size(seed)
            target = self.scene.object_by_id(item.involved_marks[0])
            self.assertEqual(item.numeric_answer, math.floor(max(target.obb.extents) * 100 + 0.5 + 1e-9))
            self.assertEqual(item.unit, "cm")
            self.assertIn(mark_ref(target), item.question)

    def test_object_size_rounds_halves_up(self):
        scene = make_scene([make_object(1, "vase", (0, 0, 0), (0.125, 0.1, 0.1))])
        self.assertEqual(QAGenerator(scene).gen_object_size(0).numeric_answer, 13.0)
        self.assertEqual(whole_centimeters(0.145), 15.0)
        self.assertEqual(whole_centimeters(0.144), 14.0)
        self.assertEqual(whole_centimeters(2.0), 200.0)

    def test_room_size_from_floor_cells(self):
        cell = 0.05
        centers = (np.arange(80) + 0.5) * cell, (np.arange(60) + 0.5) * cell
        gx, gy = np.meshgrid(*centers, indexing="ij")
        floor = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
        # The ceiling overhangs the floor by 1 m; it must not count
        cx, cy = np.meshgrid((np.arange(100) + 0.5) * cell, centers[1], indexing="ij")
        ceiling = np.column_stack([cx.ravel(), cy.ravel(), np.full(cx.size, 2.5)])
        cloud = PointCloud(points=np.vstack([floor, ceiling]))
        item = QAGenerator(self.scene, cloud).gen_room_size(0)
        self.assertEqual(item.numeric_answer, 12.0)
        self.assertEqual(item.unit, "m²")
        self.assertAlmostEqual(occupied_floor_area(PointCloud(points=floor)), 12.0)

    def test_room_size_of_single_point_is_one_cell(self):
        cloud = PointCloud(points=np.array([[1.0, 1.0, 0.0]]))
        self.assertEqual(QAGenerator(self.scene, cloud).gen_room_size(0).numeric_answer, 0.0025)

    def test_room_size_needs_cloud(self):
        with self.assertRaises(EmptyCloud):
            self.generator.gen_room_size(0)


class TestRelativeDirection(unittest.TestCase):
    def setUp(self):
        self.scene = furnished_scene()

    def test_answer_matches_geometry(self):
        for scheme in DirectionScheme:
            generator = QAGenerator(self.scene, config=QAConfig(direction_scheme=scheme))
            for seed in range(100):
                item = generator.gen_relative_direction(seed)
                standing, facing, target = (self.scene.object_by_id(m) for m in item.involved_marks)
                angle = signed_angle(xy(facing) - xy(standing), xy(target) - xy(standing))
                self.assertEqual(item.correct_text, direction_bin(angle, scheme))
                self.assertEqual(len({standing.label, facing.label, target.label}), 3)
                self.assertNotIn("chair", (standing.label, facing.label, target.label))

    def test_pixel_filter(self):
        generator = QAGenerator(self.scene, config=QAConfig(min_pixel_distance=20.0))
        mpp = generator.meters_per_pixel
        for seed in range(100):
            item = generator.gen_relative_direction(seed)
            objs = [self.scene.object_by_id(m) for m in item.involved_marks]
            for i in range(3):
                for j in range(i + 1, 3):
                    self.assertGreaterEqual(np.linalg.norm(xy(objs[i]) - xy(objs[j])) / mpp, 20.0)

    def test_rotation_invariance(self):
        generator = QAGenerator(self.scene)
        rotated_generator = QAGenerator(rotate_scene(self.scene, 73.0))
        self.assertAlmostEqual(generator.meters_per_pixel, rotated_generator.meters_per_pixel, places=9)
        for seed in range(500):
            a = generator.gen_relative_direction(seed)
            b = rotated_generator.gen_relative_direction(seed)
            self.assertEqual(a.involved_marks, b.involved_marks)
            self.assertEqual(a.correct_choice, b.correct_choice)
            self.assertAlmostEqual(a.trace["angle_deg"], b.trace["angle_deg"], places=6)

    def test_too_few_unambiguous_objects(self):
        scene = make_scene([
            make_object(1, "chair", (0, 0, 0)), make_object(2, "chair", (2, 0, 0)), make_object(3, "table", (0, 2, 0)),
        ])
        with self.assertRaises(NoValidTriplet):
            QAGenerator(scene).gen_relative_direction(0)

    def test_known_layout(self):
        scene = make_scene([
            make_object(1, "door", (0, 0, 0.5)),
            make_object(2, "window", (0, 4, 0.5)),
            make_object(3, "desk", (3, 1, 0.5)),
        ])
        item = QAGenerator(scene, config=QAConfig(min_pixel_distance=0.0)).gen_relative_direction(5)
        roles = {item.trace[k]["label"]: k for k in ("standing", "facing", "target")}
        if roles["door"] == "standing" and roles["window"] == "facing":
            self.assertEqual(item.correct_text, "right")
        self.assertIn(item.correct_text, ("front", "left", "right", "back"))
        self.assertEqual(item.choices, ["front", "left", "right", "back"])


class TestRelativeDistance(unittest.TestCase):
    def setUp(self):
        self.scene = furnished_scene()

    def test_correct_choice_is_closest(self):
        generator = QAGenerator(self.scene)
        for seed in range(100):
            item = generator.gen_relative_distance(seed)
            reference = self.scene.object_by_id(item.involved_marks[0])
            candidates = [self.scene.object_by_id(m) for m in item.involved_marks[1:]]
            distances = [min(np.linalg.norm(p - q) for p in obb_corners(c.obb) for q in obb_corners(reference.obb))
                         for c in candidates]
            order = np.argsort(distances)
            self.assertEqual(item.correct_choice, int(order[0]))
            self.assertGreaterEqual(distances[order[1]] - distances[order[0]], 0.15 - 1e-12)
            self.assertEqual(len({c.label for c in candidates}), 4)
            self.assertNotIn(reference.label, [c.label for c in candidates])
            self.assertEqual(item.choices, [c.label for c in candidates])

    def test_farthest_form(self):
        generator = QAGenerator(self.scene, config=QAConfig(distance_form="farthest", distance_metric="center"))
        for seed in range(30):
            item = generator.gen_relative_distance(seed)
            distances = item.trace["distances_m"]
            self.assertEqual(item.correct_choice, int(np.argmax(distances)))
            self.assertIn("farthest", item.question)

    def test_too_few_candidate_labels(self):
        scene = make_scene([
            make_object(1, "sofa", (0, 0, 0)), make_object(2, "table", (2, 0, 0)), make_object(3, "lamp", (0, 2, 0)),
        ])
        with self.assertRaises(TooFewCandidates):
            QAGenerator(scene).gen_relative_distance(0)


class TestAbsoluteDistance(unittest.TestCase):
    def test_distance_oracle(self):
        rng = np.random.default_rng(42)
        config = QAConfig(min_abs_distance_m=0.0)
        for trial in range(1000):
            a = make_object(1, "a", rng.uniform(-4, 4, 3), rng.uniform(0.1, 2.0, 3), rng.uniform(-180, 180))
            b = make_object(2, "b", rng.uniform(-4, 4, 3), rng.uniform(0.1, 2.0, 3), rng.uniform(-180, 180))
            item = QAGenerator(make_scene([a, b]), config=config).gen_absolute_distance(trial)
            expected = min(
                math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2)
                for p in obb_corners(a.obb) for q in obb_corners(b.obb)
            )
            self.assertAlmostEqual(item.trace["distance_m"], expected, places=12)
            self.assertEqual(item.numeric_answer, round(item.trace["distance_m"], 2))
            self.assertEqual(sorted(item.involved_marks), [1, 2])

    def test_close_pairs_are_skipped(self):
        scene = make_scene([
            make_object(1, "cup", (0, 0, 0), (0.1, 0.1, 0.1)),
            make_object(2, "plate", (0.12, 0, 0), (0.1, 0.1, 0.1)),
        ])
        with self.assertRaises(NoValidPair):
            QAGenerator(scene).gen_absolute_distance(0)


class TestRoutes(unittest.TestCase):
    def setUp(self):
        self.scene = furnished_scene()
        self.generator = QAGenerator(self.scene)

    def expected_actions(self, waypoints, threshold=30.0):
        points = [xy(self.scene.object_by_id(m)) for m in waypoints]
        heading = points[1] - points[0]
        actions = []
        for k in range(len(points) - 1):
            segment = points[k + 1] - points[k]
            theta = signed_angle(heading, segment)
            actions.append(
                RouteAction.TURN_RIGHT if theta > threshold else
                RouteAction.TURN_LEFT if theta < -threshold else
                RouteAction.GO_FORWARD
            )
            heading = segment
        return actions

    def test_sampled_routes_are_valid(self):
        found = 0
        for seed in range(500):
            try:
                route = self.generator.sample_route(seed)
            except NoValidRoute:
                continue
            found += 1
            objs = [self.scene.object_by_id(m) for m in route.waypoints]
            self.assertTrue(3 <= len(objs) <= 5)
            self.assertEqual(len({o.label for o in objs}), len(objs))
            self.assertEqual(route.facing_mark, route.waypoints[1])
            self.assertEqual(route.actions[0], RouteAction.GO_FORWARD)
            self.assertEqual(route.actions, self.expected_actions(route.waypoints))
            on_route = set(route.waypoints)
            for a, b in zip(objs, objs[1:]):
                self.assertGreaterEqual(np.linalg.norm(xy(a) - xy(b)), 0.8)
                for other in self.scene.objects:
                    if other.mark_id in on_route:
                        continue
                    clearance = segment_clearance((xy(a), xy(b)), footprint_polygon(other.obb))
                    self.assertGreaterEqual(clearance, 0.25)
        self.assertGreater(found, 400)

    def test_route_item(self):
        item = self.generator.gen_route_plan(3)
        route = RouteSpec.from_dict(item.trace["route"])
        self.assertEqual(item.question.count("[please fill in]"), 1)
        blank = item.trace["blank_index"]
        self.assertEqual(ROUTE_CHOICES[item.correct_choice], route.actions[blank])
        self.assertEqual(item.choices, ["Go forward", "Turn left", "Turn right"])
        self.assertEqual(item.involved_marks, route.waypoints)

    def test_augmentation(self):
        route = RouteSpec(waypoints=[10, 7, 6, 9, 1], facing_mark=7, actions=["GO_FORWARD"] * 4, clearance_m=0.25)
        variants = self.generator.augment_route(route)
        self.assertEqual([v.waypoints for v in variants], [
            [1, 9, 6, 7, 10], [10, 7, 6], [7, 6, 9], [6, 9, 1], [10, 7, 6, 9], [7, 6, 9, 1],
        ])
        for variant in variants:
            self.assertEqual(variant.actions, self.expected_actions(variant.waypoints))

    def test_route_spec_validation(self):
        with self.assertRaises(ValidationError):
            RouteSpec(waypoints=[1, 2], facing_mark=2, actions=["GO_FORWARD"], clearance_m=0.25)
        with self.assertRaises(ValidationError):
            RouteSpec(waypoints=[1, 2, 3], facing_mark=3, actions=["GO_FORWARD"] * 2, clearance_m=0.25)

    def test_no_route_with_two_labels(self):
        scene = make_scene([make_object(1, "chair", (0, 0, 0)), make_object(2, "table", (3, 0, 0))])
        with self.assertRaises(NoValidRoute):
            QAGenerator(scene).sample_route(0)

    def test_no_route_with_three_labels(self):
        scene = make_scene([
            make_object(1, "chair", (0, 0, 0)),
            make_object(2, "table", (3, 0, 0)),
            make_object(3, "sofa", (3, 3, 0)),
        ])
        for seed in range(20):
            with self.assertRaises(NoValidRoute):
                QAGenerator(scene).sample_route(seed)

    def test_blank_is_never_the_first_action(self):
        blanks = set()
        for seed in range(60):
            try:
                item = self.generator.gen_route_plan(seed)
            except NoValidRoute:
                continue
            blanks.add(item.trace["blank_index"])
            self.assertLess(item.trace["blank_index"], len(item.trace["route"]["actions"]))
        self.assertNotIn(0, blanks)
        self.assertIn(1, blanks)


class TestGenerateItems(unittest.TestCase):
    def setUp(self):
        self.scene = furnished_scene()

    def test_deterministic(self):
        for category in (QACategory.REL_DIRECTION, QACategory.REL_DISTANCE, QACategory.ROUTE_PLAN, QACategory.COUNT):
            a = QAGenerator(self.scene).generate_items(category, 10, base_seed=7)
            b = QAGenerator(self.scene).generate_items(category, 10, base_seed=7)
            self.assertEqual([i.to_dict() for i in a], [i.to_dict() for i in b])
            self.assertTrue(all(i.qa_id.startswith(f"scene0000-{category.value.lower()}-") for i in a))

    def test_questions_are_unique(self):
        items = QAGenerator(self.scene).generate_items(QACategory.COUNT, 30)
        keys = [(i.question, i.gold_text()) for i in items]
        self.assertEqual(len(keys), len(set(keys)))
        self.assertLessEqual(len(items), len(QAGenerator(self.scene).countable_labels()))

    def test_failed_draws_are_skipped(self):
        scene = make_scene([make_object(1, "chair", (0, 0, 0)), make_object(2, "chair", (2, 0, 0))])
        self.assertEqual(QAGenerator(scene).generate_items(QACategory.REL_DIRECTION, 5), [])

    def test_imported_categories_are_not_generated(self):
        with self.assertRaises(ValidationError):
            QAGenerator(self.scene).generate(QACategory.OBJ_ATTRIBUTE, 0)

    def test_route_augmentation(self):
        generator = QAGenerator(self.scene, config=QAConfig(route_augmentation=True))
        items = generator.generate_items(QACategory.ROUTE_PLAN, 2)
        augmented = [i for i in items if "augmented_from" in i.trace]
        self.assertTrue(augmented)
        for item in augmented:
            self.assertTrue(item.qa_id.startswith(item.trace["augmented_from"] + "-aug"))

    def test_augmentation_stub(self):
        item = QAGenerator(self.scene).gen_relative_direction(3)
        stub = emit_augmentation_stub(item)
        self.assertIn(f"Gold answer: {item.correct_text}", stub)
        self.assertIn(item.question, stub)


class TestShards(unittest.TestCase):
    def setUp(self):
        self.scene = furnished_scene()
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_and_read(self):
        generator = QAGenerator(self.scene)
        items = generator.generate_items(QACategory.REL_DISTANCE, 3) + generator.generate_items(QACategory.OBJ_SIZE, 2)
        path = os.path.join(self.tmp.name, "qa.jsonl")
        write_shard(items, path)
        self.assertEqual([i.to_dict() for i in read_shard(path)], [i.to_dict() for i in items])
        with open(path, encoding="utf-8") as f:
            first = f.readline()
        self.assertEqual(list(json.loads(first)), sorted(json.loads(first)))

    def test_bad_line(self):
        path = os.path.join(self.tmp.name, "bad.jsonl")
        with open(path, "w") as f:
            f.write("{oops\n")
        with self.assertRaises(ParseError):
            read_shard(path)

    def test_ground_marks(self):
        self.assertEqual(ground_marks("Is the sofa [1] next to the tv [5]?", self.scene), [1, 5])
        self.assertEqual(ground_marks("What color are the chairs?", self.scene), [3, 4])
        self.assertEqual(ground_marks("Is the fridge white?", self.scene), [6])
        self.assertEqual(ground_marks("Is there a piano?", self.scene), [])

    def test_import_external_items(self):
        path = os.path.join(self.tmp.name, "external.jsonl")
        records = [
            {"scene_id": "scene0000", "category": "obj_attribute", "question": "What color is the sofa?",
             "text_answer": "blue"},
            {"scene_id": "other", "category": "binary_verify", "question": "Is it?", "text_answer": "yes"},
            {"scene_id": "scene0000", "category": "binary_verify", "question": "Is the lamp on the left of the tv?",
             "choices": ["yes", "no"], "correct_choice": 0, "qa_id": "custom"},
        ]
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(json.dumps(r) for r in records) + "\n")
        items = import_external_items(path, self.scene)
        self.assertEqual([i.qa_id for i in items], ["scene0000-obj_attribute-ext0001", "custom"])
        self.assertEqual(items[0].answer_kind, AnswerKind.TEXT)
        self.assertEqual(items[0].involved_marks, [1])
        self.assertEqual(items[1].answer_kind, AnswerKind.CHOICE)
        self.assertEqual(items[1].involved_marks, [5, 8])
        self.assertEqual(items[1].trace["source"], "external")

    def test_import_rejects_unknown_marks(self):
        path = os.path.join(self.tmp.name, "external.jsonl")
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"category": "localization", "question": "Where?", "text_answer": "here",
                                "involved_marks": [99]}) + "\n")
        with self.assertRaises(UnknownMarkId):
            import_external_items(path, self.scene)


if __name__ == '__main__':
    unittest.main()
