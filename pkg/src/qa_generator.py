"""
QA Generator
Template-driven spatial QA items grounded in scene geometry: counting, relative direction,
relative and absolute distance, object and room size, and route planning.
Also reads and writes line-delimited QA shards and imports externally sourced items.
"""

import hashlib
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from loguru import logger

from .bev_renderer import DEFAULT_KEEP_FRACTION, DEFAULT_MARGIN_PX, DEFAULT_RESOLUTION, remove_ceiling
from .errors import (
    AmbiguousAngle,
    DegenerateVector,
    EmptyCloud,
    GenerationError,
    IoError,
    LabelAbsent,
    NoUnambiguousObject,
    NoUnambiguousReference,
    NoValidPair,
    NoValidRoute,
    NoValidTriplet,
    ParseError,
    TooFewCandidates,
    UnknownMarkId,
    ValidationError,
)
from .scene_ingest import ObjectInstance, PointCloud, SceneManifest
from .spatial_core import (
    DIRECTION_LABELS,
    DirectionScheme,
    center_distance,
    direction_bin,
    footprint_polygon,
    min_corner_distance,
    segment_clearance,
    signed_angle,
)


class QACategory(str, Enum):
    COUNT = "COUNT"
    REL_DIRECTION = "REL_DIRECTION"
    REL_DISTANCE = "REL_DISTANCE"
    ABS_DISTANCE = "ABS_DISTANCE"
    OBJ_SIZE = "OBJ_SIZE"
    ROOM_SIZE = "ROOM_SIZE"
    ROUTE_PLAN = "ROUTE_PLAN"
    # Imported only
    OBJ_ATTRIBUTE = "OBJ_ATTRIBUTE"
    BINARY_VERIFY = "BINARY_VERIFY"
    LOCALIZATION = "LOCALIZATION"


GENERATED_CATEGORIES: Tuple[QACategory, ...] = (
    QACategory.COUNT,
    QACategory.REL_DIRECTION,
    QACategory.REL_DISTANCE,
    QACategory.ABS_DISTANCE,
    QACategory.OBJ_SIZE,
    QACategory.ROOM_SIZE,
    QACategory.ROUTE_PLAN,
)
IMPORTED_CATEGORIES: Tuple[QACategory, ...] = (
    QACategory.OBJ_ATTRIBUTE,
    QACategory.BINARY_VERIFY,
    QACategory.LOCALIZATION,
)


class AnswerKind(str, Enum):
    NUMERIC = "NUMERIC"
    CHOICE = "CHOICE"
    TEXT = "TEXT"


class RouteAction(str, Enum):
    GO_FORWARD = "GO_FORWARD"
    TURN_LEFT = "TURN_LEFT"
    TURN_RIGHT = "TURN_RIGHT"

    @property
    def text(self) -> str:
        return self.value.replace("_", " ").capitalize()


ROUTE_CHOICES: Tuple[RouteAction, ...] = (RouteAction.GO_FORWARD, RouteAction.TURN_LEFT, RouteAction.TURN_RIGHT)

DEFAULT_STOPLIST = ("wall", "floor", "ceiling", "object")
# Never treated as route obstacles
NON_OBSTACLE_LABELS = frozenset({"floor", "ceiling"})

MAX_DIRECTION_ATTEMPTS = 64
MAX_DISTANCE_ATTEMPTS = 64
MAX_ROUTE_ATTEMPTS = 256
MIN_ROUTE_LABELS = 4
ROOM_CELL_M = 0.05

COUNT_TEMPLATE = "How many {label}(s) are there in this room?"
DIRECTION_TEMPLATE = (
    "If I am standing by the {standing} and facing the {facing}, "
    "is the {target} to my {options}?"
)
CLOSEST_TEMPLATE = "Which of these objects ({candidates}) is closest to the {reference}?"
FARTHEST_TEMPLATE = "Which of these objects ({candidates}) is farthest from the {reference}?"
ABS_DISTANCE_TEMPLATE = "What is the distance between the {first} and the {second} (in meters)?"
OBJ_SIZE_TEMPLATE = (
    "What is the length of the longest dimension (length, width, or height) "
    "of the {target}, measured in centimeters?"
)
ROOM_SIZE_TEMPLATE = (
    "What is the size of this room (in square meters)? "
    "If multiple rooms are shown, estimate the size of the combined space."
)
ROUTE_TEMPLATE = (
    "You are a robot beginning at the {start} and facing the {facing}. "
    "You want to navigate to the {goal}. You will perform the following actions "
    "(for each [please fill in], choose go forward, turn left, or turn right):\n{steps}\n"
    "What should replace the [please fill in]?"
)


def mark_ref(obj: ObjectInstance) -> str:
    """Label with its mark id in brackets, as embedded in question text"""
    return f"{obj.label} [{obj.mark_id}]"


@dataclass
class QAItem:
    qa_id: str
    scene_id: str
    category: QACategory
    question: str
    answer_kind: AnswerKind
    numeric_answer: Optional[float] = None
    unit: Optional[str] = None
    choices: Optional[List[str]] = None
    correct_choice: Optional[int] = None
    text_answer: Optional[str] = None
    involved_marks: List[int] = field(default_factory=list)
    trace: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.category = QACategory(self.category)
        self.answer_kind = AnswerKind(self.answer_kind)
        has_numeric = self.numeric_answer is not None
        has_choice = self.choices is not None or self.correct_choice is not None
        has_text = self.text_answer is not None
        if self.answer_kind == AnswerKind.NUMERIC:
            if not has_numeric or has_choice or has_text:
                raise ValidationError("numeric_answer", f"{self.qa_id}: NUMERIC items carry only numeric_answer")
            if not math.isfinite(self.numeric_answer) or self.numeric_answer < 0:
                raise ValidationError("numeric_answer", f"{self.qa_id}: must be finite and >= 0, got {self.numeric_answer}")
        elif self.answer_kind == AnswerKind.CHOICE:
            if has_numeric or has_text or self.choices is None or self.correct_choice is None:
                raise ValidationError("choices", f"{self.qa_id}: CHOICE items carry choices and correct_choice only")
            if not 0 <= self.correct_choice < len(self.choices):
                raise ValidationError("correct_choice", f"{self.qa_id}: index {self.correct_choice} out of range")
        elif not has_text or has_numeric or has_choice:
            raise ValidationError("text_answer", f"{self.qa_id}: TEXT items carry only text_answer")

    @property
    def correct_text(self) -> Optional[str]:
        if self.answer_kind != AnswerKind.CHOICE:
            return None
        return self.choices[self.correct_choice]

    def gold_text(self) -> str:
        if self.answer_kind == AnswerKind.CHOICE:
            return self.correct_text
        if self.answer_kind == AnswerKind.TEXT:
            return self.text_answer
        value = format_number(self.numeric_answer)
        return f"{value} {self.unit}" if self.unit else value

    def check_marks(self, scene: SceneManifest):
        known = {obj.mark_id for obj in scene.objects}
        for mark_id in self.involved_marks:
            if mark_id not in known:
                raise UnknownMarkId(mark_id)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "qa_id": self.qa_id,
            "scene_id": self.scene_id,
            "category": self.category.value,
            "question": self.question,
            "answer_kind": self.answer_kind.value,
            "numeric_answer": self.numeric_answer,
            "unit": self.unit,
            "choices": list(self.choices) if self.choices is not None else None,
            "correct_choice": self.correct_choice,
            "text_answer": self.text_answer,
            "involved_marks": list(self.involved_marks),
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QAItem":
        try:
            return cls(
                qa_id=str(data["qa_id"]),
                scene_id=str(data["scene_id"]),
                category=QACategory(data["category"]),
                question=str(data["question"]),
                answer_kind=AnswerKind(data["answer_kind"]),
                numeric_answer=None if data.get("numeric_answer") is None else float(data["numeric_answer"]),
                unit=data.get("unit"),
                choices=None if data.get("choices") is None else [str(c) for c in data["choices"]],
                correct_choice=None if data.get("correct_choice") is None else int(data["correct_choice"]),
                text_answer=data.get("text_answer"),
                involved_marks=[int(m) for m in data.get("involved_marks", [])],
                trace=dict(data.get("trace") or {}),
            )
        except KeyError as e:
            raise ParseError(f"QA item is missing key {e}") from e
        except (TypeError, ValueError) as e:
            raise ParseError(f"QA item {data.get('qa_id')!r} is malformed: {e}") from e


@dataclass
class RouteSpec:
    waypoints: List[int]
    facing_mark: int
    actions: List[RouteAction]
    clearance_m: float

    def __post_init__(self):
        if not 3 <= len(self.waypoints) <= 5:
            raise ValidationError("waypoints", f"need 3 to 5 waypoints, got {len(self.waypoints)}")
        if len(set(self.waypoints)) != len(self.waypoints):
            raise ValidationError("waypoints", "waypoints must be distinct")
        if self.facing_mark != self.waypoints[1]:
            raise ValidationError("facing_mark", "must be the second waypoint")
        self.actions = [RouteAction(a) for a in self.actions]
        if len(self.actions) != len(self.waypoints) - 1:
            raise ValidationError("actions", f"need {len(self.waypoints) - 1} actions, got {len(self.actions)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "waypoints": list(self.waypoints),
            "facing_mark": self.facing_mark,
            "actions": [a.value for a in self.actions],
            "clearance_m": self.clearance_m,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RouteSpec":
        return cls(
            waypoints=[int(w) for w in data["waypoints"]],
            facing_mark=int(data["facing_mark"]),
            actions=[RouteAction(a) for a in data["actions"]],
            clearance_m=float(data["clearance_m"]),
        )


@dataclass
class QAConfig:
    direction_scheme: DirectionScheme = DirectionScheme.FOUR_WAY
    min_pixel_distance: float = 20.0
    bev_resolution: int = DEFAULT_RESOLUTION
    bev_margin_px: int = DEFAULT_MARGIN_PX
    meters_per_pixel: Optional[float] = None
    n_candidates: int = 4
    distance_metric: str = "corner"
    distance_form: str = "closest"
    distance_margin_m: float = 0.15
    min_abs_distance_m: float = 0.1
    turn_threshold_deg: float = 30.0
    route_clearance_m: float = 0.25
    route_spacing_m: float = 0.8
    route_candidates: int = 15
    route_augmentation: bool = False
    room_cell_m: float = ROOM_CELL_M
    ceiling_keep_fraction: float = DEFAULT_KEEP_FRACTION
    stoplist: Tuple[str, ...] = DEFAULT_STOPLIST

    def __post_init__(self):
        self.direction_scheme = DirectionScheme(self.direction_scheme)
        self.stoplist = tuple(self.stoplist)
        if not 3 <= self.n_candidates <= 5:
            raise ValidationError("n_candidates", f"must be in 3..5, got {self.n_candidates}")
        if self.distance_metric not in ("corner", "center"):
            raise ValidationError("distance_metric", f"must be corner or center, got {self.distance_metric!r}")
        if self.distance_form not in ("closest", "farthest", "mixed"):
            raise ValidationError("distance_form", f"must be closest, farthest or mixed, got {self.distance_form!r}")
        if self.meters_per_pixel is not None and self.meters_per_pixel <= 0:
            raise ValidationError("meters_per_pixel", "must be > 0")


def derive_seed(scene_id: str, category: str, index: int, base_seed: int = 0) -> int:
    """Stable 64-bit seed for one (scene, category, item index)"""
    category = category.value if isinstance(category, QACategory) else str(category)
    digest = hashlib.sha256(f"{base_seed}:{scene_id}:{category}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def route_blank_index(rng: np.random.Generator, n_actions: int) -> int:
    """Blank index in [1, n_actions); action 0 always walks toward the facing mark"""
    return 1 + int(rng.integers(n_actions - 1))


def whole_centimeters(meters: float) -> float:
    """Meters to whole centimeters, halves rounded up"""
    cm = Decimal(repr(float(meters))).scaleb(2)
    return float(cm.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def format_number(value: float) -> str:
    return f"{value:g}" if float(value).is_integer() else f"{value:.2f}".rstrip("0")


def occupied_floor_area(cloud: PointCloud, cell: float = ROOM_CELL_M) -> float:
    """Occupied XY cells times cell area"""
    if len(cloud) == 0:
        raise EmptyCloud("cannot measure the floor area of an empty cloud")
    cells = np.floor(cloud.points[:, :2] / cell).astype(np.int64)
    return float(len(np.unique(cells, axis=0)) * cell * cell)


class QAGenerator:
    """
    Generates QA items for one scene.
    Every generator is a pure function of (scene, config, rng_seed).
    """

    def __init__(self, scene: SceneManifest, cloud: Optional[PointCloud] = None, config: Optional[QAConfig] = None):
        self.scene = scene
        self.cloud = cloud
        self.config = config or QAConfig()
        self._by_id = {obj.mark_id: obj for obj in scene.objects}
        counts: Dict[str, int] = {}
        for obj in scene.objects:
            counts[obj.label] = counts.get(obj.label, 0) + 1
        self._label_counts = counts
        self._meters_per_pixel: Optional[float] = None

    # ------------------------------------------------------------------
    # Shared helpers
    # ------------------------------------------------------------------

    def _qa_id(self, category: QACategory, rng_seed: int, qa_id: Optional[str]) -> str:
        return qa_id or f"{self.scene.scene_id}-{category.value.lower()}-{rng_seed:016x}"

    def unambiguous_objects(self) -> List[ObjectInstance]:
        """Objects whose label occurs once in the scene and is not stoplisted, ascending mark_id"""
        stop = set(self.config.stoplist)
        return sorted(
            (obj for obj in self.scene.objects if self._label_counts[obj.label] == 1 and obj.label not in stop),
            key=lambda o: o.mark_id,
        )

    def countable_labels(self) -> List[str]:
        stop = set(self.config.stoplist)
        return sorted(label for label in self._label_counts if label not in stop)

    @property
    def meters_per_pixel(self) -> float:
        """Rotation-invariant BEV scale estimate used by the pixel-distance filter"""
        if self.config.meters_per_pixel is not None:
            return self.config.meters_per_pixel
        if self._meters_per_pixel is None:
            if self.cloud is not None and len(self.cloud) > 0:
                xy = self.cloud.points[:, :2]
            else:
                xy = np.array([obj.obb.center[:2] for obj in self.scene.objects], dtype=np.float64)
            if len(xy) == 0:
                raise EmptyCloud("no geometry to estimate the BEV scale from")
            radius = float(np.linalg.norm(xy - xy.mean(axis=0), axis=1).max())
            usable = self.config.bev_resolution - 2 * self.config.bev_margin_px
            self._meters_per_pixel = max(2.0 * radius, 1e-3) / usable
        return self._meters_per_pixel

    def _pixel_distance(self, a: ObjectInstance, b: ObjectInstance) -> float:
        dx = a.obb.center[0] - b.obb.center[0]
        dy = a.obb.center[1] - b.obb.center[1]
        return math.hypot(dx, dy) / self.meters_per_pixel

    def _distance(self, a: ObjectInstance, b: ObjectInstance) -> float:
        if self.config.distance_metric == "center":
            return center_distance(a, b)
        return min_corner_distance(a.obb, b.obb)

    @staticmethod
    def _xy(obj: ObjectInstance) -> np.ndarray:
        return np.array(obj.obb.center[:2], dtype=np.float64)

    # ------------------------------------------------------------------
    # Counting
    # ------------------------------------------------------------------

    def gen_count(self, label: str, rng_seed: int, qa_id: Optional[str] = None) -> QAItem:
        instances = sorted(obj.mark_id for obj in self.scene.objects if obj.label == label)
        if not instances:
            raise LabelAbsent(f"label {label!r} does not occur in scene {self.scene.scene_id}")
        return QAItem(
            qa_id=self._qa_id(QACategory.COUNT, rng_seed, qa_id),
            scene_id=self.scene.scene_id,
            category=QACategory.COUNT,
            question=COUNT_TEMPLATE.format(label=label),
            answer_kind=AnswerKind.NUMERIC,
            numeric_answer=float(len(instances)),
            involved_marks=instances,
            trace={"label": label, "instances": instances},
        )

    # ------------------------------------------------------------------
    # Relative direction
    # ------------------------------------------------------------------

    def gen_relative_direction(
        self,
        rng_seed: int,
        scheme: Optional[DirectionScheme] = None,
        qa_id: Optional[str] = None,
    ) -> QAItem:
        scheme = DirectionScheme(scheme or self.config.direction_scheme)
        candidates = self.unambiguous_objects()
        if len(candidates) < 3:
            raise NoValidTriplet(f"scene {self.scene.scene_id} has {len(candidates)} unambiguous objects, need 3")
        rng = np.random.default_rng(rng_seed)
        labels = list(DIRECTION_LABELS[scheme])
        log = logger.bind(scene_id=self.scene.scene_id)

        for attempt in range(MAX_DIRECTION_ATTEMPTS):
            standing, facing, target = (candidates[i] for i in rng.choice(len(candidates), size=3, replace=False))
            pairs = ((standing, facing), (standing, target), (facing, target))
            if any(self._pixel_distance(a, b) < self.config.min_pixel_distance for a, b in pairs):
                continue
            heading = self._xy(facing) - self._xy(standing)
            offset = self._xy(target) - self._xy(standing)
            try:
                angle = signed_angle(heading, offset)
                answer = direction_bin(angle, scheme)
            except (AmbiguousAngle, DegenerateVector) as e:
                log.debug("Direction attempt {} rejected: {}", attempt, e)
                continue
            options = ", ".join(labels[:-1]) + f", or {labels[-1]}"
            return QAItem(
                qa_id=self._qa_id(QACategory.REL_DIRECTION, rng_seed, qa_id),
                scene_id=self.scene.scene_id,
                category=QACategory.REL_DIRECTION,
                question=DIRECTION_TEMPLATE.format(
                    standing=mark_ref(standing), facing=mark_ref(facing), target=mark_ref(target), options=options),
                answer_kind=AnswerKind.CHOICE,
                choices=labels,
                correct_choice=labels.index(answer),
                involved_marks=[standing.mark_id, facing.mark_id, target.mark_id],
                trace={
                    "standing": {"mark_id": standing.mark_id, "label": standing.label},
                    "facing": {"mark_id": facing.mark_id, "label": facing.label},
                    "target": {"mark_id": target.mark_id, "label": target.label},
                    "angle_deg": angle,
                    "scheme": scheme.value,
                    "attempts": attempt + 1,
                },
            )
        raise NoValidTriplet(f"no valid triplet in scene {self.scene.scene_id} after {MAX_DIRECTION_ATTEMPTS} attempts")

    # ------------------------------------------------------------------
    # Relative distance
    # ------------------------------------------------------------------

    def gen_relative_distance(
        self,
        rng_seed: int,
        n_candidates: Optional[int] = None,
        qa_id: Optional[str] = None,
    ) -> QAItem:
        n = n_candidates or self.config.n_candidates
        if not 3 <= n <= 5:
            raise ValidationError("n_candidates", f"must be in 3..5, got {n}")
        references = self.unambiguous_objects()
        if not references:
            raise NoUnambiguousReference(f"scene {self.scene.scene_id} has no unambiguous reference object")
        stop = set(self.config.stoplist)
        groups: Dict[int, Dict[str, List[ObjectInstance]]] = {}
        for reference in references:
            by_label: Dict[str, List[ObjectInstance]] = {}
            for obj in self.scene.objects:
                if obj.label != reference.label and obj.label not in stop:
                    by_label.setdefault(obj.label, []).append(obj)
            if len(by_label) >= n:
                groups[reference.mark_id] = by_label
        references = [r for r in references if r.mark_id in groups]
        if not references:
            raise TooFewCandidates(f"no reference in scene {self.scene.scene_id} has {n} candidate labels")
        rng = np.random.default_rng(rng_seed)

        for attempt in range(MAX_DISTANCE_ATTEMPTS):
            reference = references[int(rng.integers(len(references)))]
            by_label = groups[reference.mark_id]
            labels = sorted(by_label)
            picked_labels = [labels[i] for i in rng.choice(len(labels), size=n, replace=False)]
            candidates = []
            for label in picked_labels:
                group = sorted(by_label[label], key=lambda o: o.mark_id)
                candidates.append(group[int(rng.integers(len(group)))])
            form = self.config.distance_form
            if form == "mixed":
                form = ("closest", "farthest")[int(rng.integers(2))]

            distances = [self._distance(c, reference) for c in candidates]
            ranked = sorted(distances, reverse=(form == "farthest"))
            if abs(ranked[1] - ranked[0]) < self.config.distance_margin_m:
                logger.bind(scene_id=self.scene.scene_id).debug(
                    "Distance attempt {} ambiguous: top-2 {:.3f}/{:.3f}", attempt, ranked[0], ranked[1])
                continue
            correct = distances.index(ranked[0])
            template = CLOSEST_TEMPLATE if form == "closest" else FARTHEST_TEMPLATE
            return QAItem(
                qa_id=self._qa_id(QACategory.REL_DISTANCE, rng_seed, qa_id),
                scene_id=self.scene.scene_id,
                category=QACategory.REL_DISTANCE,
                question=template.format(
                    candidates=", ".join(mark_ref(c) for c in candidates), reference=mark_ref(reference)),
                answer_kind=AnswerKind.CHOICE,
                choices=[c.label for c in candidates],
                correct_choice=correct,
                involved_marks=[reference.mark_id] + [c.mark_id for c in candidates],
                trace={
                    "reference": {"mark_id": reference.mark_id, "label": reference.label},
                    "candidates": [{"mark_id": c.mark_id, "label": c.label} for c in candidates],
                    "distances_m": distances,
                    "metric": self.config.distance_metric,
                    "form": form,
                    "attempts": attempt + 1,
                },
            )
        raise NoUnambiguousReference(
            f"no reference with a clear {self.config.distance_form} candidate in scene {self.scene.scene_id}")

    # ------------------------------------------------------------------
    # Absolute distance and sizes
    # ------------------------------------------------------------------

    def gen_absolute_distance(self, rng_seed: int, qa_id: Optional[str] = None) -> QAItem:
        objects = self.unambiguous_objects()
        pairs = list(itertools.combinations(objects, 2))
        if not pairs:
            raise NoValidPair(f"scene {self.scene.scene_id} has fewer than two unambiguous objects")
        rng = np.random.default_rng(rng_seed)
        for index in rng.permutation(len(pairs)):
            first, second = pairs[int(index)]
            if rng.integers(2):
                first, second = second, first
            distance = min_corner_distance(first.obb, second.obb)
            if distance < self.config.min_abs_distance_m:
                continue
            return QAItem(
                qa_id=self._qa_id(QACategory.ABS_DISTANCE, rng_seed, qa_id),
                scene_id=self.scene.scene_id,
                category=QACategory.ABS_DISTANCE,
                question=ABS_DISTANCE_TEMPLATE.format(first=mark_ref(first), second=mark_ref(second)),
                answer_kind=AnswerKind.NUMERIC,
                numeric_answer=round(distance, 2),
                unit="m",
                involved_marks=[first.mark_id, second.mark_id],
                trace={"distance_m": distance, "pair": [first.mark_id, second.mark_id]},
            )
        raise NoValidPair(
            f"every pair in scene {self.scene.scene_id} is closer than {self.config.min_abs_distance_m} m")

    def gen_object_size(self, rng_seed: int, qa_id: Optional[str] = None) -> QAItem:
        objects = self.unambiguous_objects()
        if not objects:
            raise NoUnambiguousObject(f"scene {self.scene.scene_id} has no unambiguous object")
        rng = np.random.default_rng(rng_seed)
        target = objects[int(rng.integers(len(objects)))]
        longest_m = max(target.obb.extents)
        return QAItem(
            qa_id=self._qa_id(QACategory.OBJ_SIZE, rng_seed, qa_id),
            scene_id=self.scene.scene_id,
            category=QACategory.OBJ_SIZE,
            question=OBJ_SIZE_TEMPLATE.format(target=mark_ref(target)),
            answer_kind=AnswerKind.NUMERIC,
            numeric_answer=whole_centimeters(longest_m),
            unit="cm",
            involved_marks=[target.mark_id],
            trace={"extents_m": list(target.obb.extents), "longest_m": longest_m},
        )

    def gen_room_size(self, rng_seed: int, qa_id: Optional[str] = None) -> QAItem:
        if self.cloud is None or len(self.cloud) == 0:
            raise EmptyCloud(f"scene {self.scene.scene_id} has no points for room size")
        area = occupied_floor_area(
            remove_ceiling(self.cloud, self.config.ceiling_keep_fraction), self.config.room_cell_m)
        return QAItem(
            qa_id=self._qa_id(QACategory.ROOM_SIZE, rng_seed, qa_id),
            scene_id=self.scene.scene_id,
            category=QACategory.ROOM_SIZE,
            question=ROOM_SIZE_TEMPLATE,
            answer_kind=AnswerKind.NUMERIC,
            numeric_answer=round(area, 6),
            unit="m²",
            involved_marks=[],
            trace={"area_m2": area, "cell_m": self.config.room_cell_m},
        )

    # ------------------------------------------------------------------
    # Routes
    # ------------------------------------------------------------------

    def _segment_ok(
        self,
        a: ObjectInstance,
        b: ObjectInstance,
        excluded: set,
        footprints: Dict[int, np.ndarray],
        clearance_m: float,
    ) -> bool:
        if np.linalg.norm(self._xy(a) - self._xy(b)) < self.config.route_spacing_m:
            return False
        segment = (self._xy(a), self._xy(b))
        for mark_id, poly in footprints.items():
            if mark_id in excluded:
                continue
            if segment_clearance(segment, poly) < clearance_m:
                return False
        return True

    def sample_route(self, rng_seed: int, clearance_m: Optional[float] = None) -> RouteSpec:
        """
        Grow a chain of 3-5 distinct-label waypoints whose segments keep `clearance_m`
        from every footprint not on the route and whose consecutive centers are spaced apart
        """
        clearance_m = self.config.route_clearance_m if clearance_m is None else clearance_m
        stop = set(self.config.stoplist)
        pool = sorted((o for o in self.scene.objects if o.label not in stop), key=lambda o: o.mark_id)
        rng = np.random.default_rng(rng_seed)
        sampled = [pool[i] for i in sorted(rng.permutation(len(pool))[:self.config.route_candidates])]
        if len({o.label for o in sampled}) < MIN_ROUTE_LABELS:
            raise NoValidRoute(
                f"scene {self.scene.scene_id} has fewer than {MIN_ROUTE_LABELS} distinct labels among route candidates")
        footprints = {
            o.mark_id: footprint_polygon(o.obb) for o in self.scene.objects if o.label not in NON_OBSTACLE_LABELS
        }

        for attempt in range(MAX_ROUTE_ATTEMPTS):
            target_len = int(rng.integers(3, 6))
            chain = [sampled[int(rng.integers(len(sampled)))]]
            while len(chain) < target_len:
                used_ids = {o.mark_id for o in chain}
                used_labels = {o.label for o in chain}
                nxt = None
                for i in rng.permutation(len(sampled)):
                    cand = sampled[int(i)]
                    if cand.mark_id in used_ids or cand.label in used_labels:
                        continue
                    if self._segment_ok(chain[-1], cand, used_ids | {cand.mark_id}, footprints, clearance_m):
                        nxt = cand
                        break
                if nxt is None:
                    break
                chain.append(nxt)
            if len(chain) < 3:
                continue
            waypoints = [o.mark_id for o in chain]
            route = RouteSpec(
                waypoints=waypoints,
                facing_mark=waypoints[1],
                actions=[RouteAction.GO_FORWARD] * (len(waypoints) - 1),
                clearance_m=clearance_m,
            )
            route.actions = self.derive_actions(route)
            logger.bind(scene_id=self.scene.scene_id).debug("Route {} found after {} attempts", waypoints, attempt + 1)
            return route
        raise NoValidRoute(f"no collision-free route in scene {self.scene.scene_id} after {MAX_ROUTE_ATTEMPTS} attempts")

    def derive_actions(self, route: RouteSpec) -> List[RouteAction]:
        """Action at each waypoint: turn relative to the current heading, then walk the next segment"""
        points = [self._xy(self._lookup(m)) for m in route.waypoints]
        heading = self._xy(self._lookup(route.facing_mark)) - points[0]
        threshold = self.config.turn_threshold_deg
        actions = []
        for k in range(len(points) - 1):
            segment = points[k + 1] - points[k]
            theta = signed_angle(heading, segment)
            if theta > threshold:
                actions.append(RouteAction.TURN_RIGHT)
            elif theta < -threshold:
                actions.append(RouteAction.TURN_LEFT)
            else:
                actions.append(RouteAction.GO_FORWARD)
            heading = segment
        return actions

    def augment_route(self, route: RouteSpec) -> List[RouteSpec]:
        """Reversed route plus every shorter contiguous sub-route of at least 3 waypoints"""
        variants: List[List[int]] = [list(reversed(route.waypoints))]
        n = len(route.waypoints)
        for length in range(3, n):
            for start in range(0, n - length + 1):
                variants.append(route.waypoints[start:start + length])
        out = []
        for waypoints in variants:
            variant = RouteSpec(
                waypoints=waypoints,
                facing_mark=waypoints[1],
                actions=[RouteAction.GO_FORWARD] * (len(waypoints) - 1),
                clearance_m=route.clearance_m,
            )
            variant.actions = self.derive_actions(variant)
            out.append(variant)
        return out

    def route_item(self, route: RouteSpec, blank: int, qa_id: str, extra_trace: Optional[Dict[str, Any]] = None) -> QAItem:
        objs = [self._lookup(m) for m in route.waypoints]
        steps = []
        for k, action in enumerate(route.actions):
            shown = "[please fill in]" if k == blank else action.text
            steps.append(f"{k + 1}. At the {mark_ref(objs[k])}: {shown}, then go to the {mark_ref(objs[k + 1])}.")
        trace = {
            "route": route.to_dict(),
            "blank_index": blank,
            "waypoint_labels": [o.label for o in objs],
        }
        trace.update(extra_trace or {})
        return QAItem(
            qa_id=qa_id,
            scene_id=self.scene.scene_id,
            category=QACategory.ROUTE_PLAN,
            question=ROUTE_TEMPLATE.format(
                start=mark_ref(objs[0]), facing=mark_ref(objs[1]), goal=mark_ref(objs[-1]), steps="\n".join(steps)),
            answer_kind=AnswerKind.CHOICE,
            choices=[a.text for a in ROUTE_CHOICES],
            correct_choice=ROUTE_CHOICES.index(route.actions[blank]),
            involved_marks=list(route.waypoints),
            trace=trace,
        )

    def gen_route_plan(self, rng_seed: int, qa_id: Optional[str] = None) -> QAItem:
        route = self.sample_route(rng_seed)
        rng = np.random.default_rng([rng_seed, 1])
        blank = route_blank_index(rng, len(route.actions))
        return self.route_item(route, blank, self._qa_id(QACategory.ROUTE_PLAN, rng_seed, qa_id))

    def _lookup(self, mark_id: int) -> ObjectInstance:
        obj = self._by_id.get(mark_id)
        if obj is None:
            raise UnknownMarkId(mark_id)
        return obj

    # ------------------------------------------------------------------
    # Dispatch
    # ------------------------------------------------------------------

    def generate(self, category: QACategory, rng_seed: int, qa_id: Optional[str] = None) -> QAItem:
        category = QACategory(category)
        if category == QACategory.COUNT:
            labels = self.countable_labels()
            if not labels:
                raise LabelAbsent(f"scene {self.scene.scene_id} has no countable labels")
            label = labels[int(np.random.default_rng(rng_seed).integers(len(labels)))]
            return self.gen_count(label, rng_seed, qa_id)
        if category == QACategory.REL_DIRECTION:
            return self.gen_relative_direction(rng_seed, qa_id=qa_id)
        if category == QACategory.REL_DISTANCE:
            return self.gen_relative_distance(rng_seed, qa_id=qa_id)
        if category == QACategory.ABS_DISTANCE:
            return self.gen_absolute_distance(rng_seed, qa_id=qa_id)
        if category == QACategory.OBJ_SIZE:
            return self.gen_object_size(rng_seed, qa_id=qa_id)
        if category == QACategory.ROOM_SIZE:
            return self.gen_room_size(rng_seed, qa_id=qa_id)
        if category == QACategory.ROUTE_PLAN:
            return self.gen_route_plan(rng_seed, qa_id=qa_id)
        raise ValidationError("category", f"{category.value} items are imported, not generated")

    def generate_items(self, category: QACategory, count: int, base_seed: int = 0) -> List[QAItem]:
        """Up to `count` items; failed draws are logged and skipped, duplicate questions dropped"""
        category = QACategory(category)
        items: List[QAItem] = []
        seen = set()
        for index in range(count):
            qa_id = f"{self.scene.scene_id}-{category.value.lower()}-{index:04d}"
            seed = derive_seed(self.scene.scene_id, category, index, base_seed)
            try:
                item = self.generate(category, seed, qa_id)
            except GenerationError as e:
                logger.bind(scene_id=self.scene.scene_id, qa_id=qa_id).warning("Skipped: {}", e)
                continue
            key = (item.question, item.gold_text())
            if key in seen:
                continue
            seen.add(key)
            item.trace["seed"] = seed
            items.append(item)
            if category == QACategory.ROUTE_PLAN and self.config.route_augmentation:
                route = RouteSpec.from_dict(item.trace["route"])
                for j, variant in enumerate(self.augment_route(route)):
                    blank = route_blank_index(np.random.default_rng([seed, 2, j]), len(variant.actions))
                    items.append(self.route_item(variant, blank, f"{qa_id}-aug{j}", {"augmented_from": qa_id}))
        return items


# ----------------------------------------------------------------------
# Augmentation stubs
# ----------------------------------------------------------------------

AUGMENTATION_INSTRUCTIONS = (
    "You are helping build a spatial reasoning dataset for indoor scenes.\n"
    "1. Rewrite the question below in three alternative phrasings that keep its meaning "
    "and every bracketed mark id.\n"
    "2. Write a long-form answer that reasons step by step from the scene facts "
    "and ends with the gold answer exactly as given.\n"
    "Do not change the gold answer."
)


def emit_augmentation_stub(item: QAItem) -> str:
    """Self-contained prompt for offline paraphrase and long-answer augmentation"""
    facts: List[str] = []
    trace = item.trace
    if item.category == QACategory.REL_DIRECTION:
        facts.append(f"Standing object: {trace['standing']['label']} [{trace['standing']['mark_id']}]")
        facts.append(f"Facing object: {trace['facing']['label']} [{trace['facing']['mark_id']}]")
        facts.append(f"Target object: {trace['target']['label']} [{trace['target']['mark_id']}]")
        facts.append(f"Signed angle (clockwise, degrees): {trace['angle_deg']:.1f}")
    elif item.category == QACategory.ROUTE_PLAN:
        facts.append("Waypoints: " + " -> ".join(trace["waypoint_labels"]))
        actions = [RouteAction(a).text for a in trace["route"]["actions"]]
        facts.append("Actions: " + ", ".join(actions))
    elif item.category == QACategory.COUNT:
        facts.append(f"Instances of {trace['label']}: {len(trace['instances'])}")
    facts.append("Generation trace: " + json.dumps(trace, sort_keys=True))
    lines = [
        AUGMENTATION_INSTRUCTIONS,
        "",
        f"Category: {item.category.value}",
        f"Question: {item.question}",
    ]
    if item.choices is not None:
        lines.append("Choices: " + ", ".join(item.choices))
    lines.append(f"Gold answer: {item.gold_text()}")
    lines.append("")
    lines.extend(facts)
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# Shards, import and grounding
# ----------------------------------------------------------------------

def write_shard(items: Iterable[QAItem], path: str):
    """One item per line, sorted keys"""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for item in items:
                f.write(json.dumps(item.to_dict(), sort_keys=True, ensure_ascii=False))
                f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write QA shard {path}: {e}") from e


def _read_jsonl(path: str) -> List[Tuple[int, Dict[str, Any]]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((number, json.loads(line)))
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}:{number}: invalid JSON: {e.msg}") from e
    return records


def read_shard(path: str) -> List[QAItem]:
    items = []
    for number, record in _read_jsonl(path):
        try:
            items.append(QAItem.from_dict(record))
        except ParseError as e:
            raise ParseError(f"{path}:{number}: {e}") from e
    return items


def ground_marks(question: str, scene: SceneManifest) -> List[int]:
    """Mark ids referenced by bracketed ids, or else by label mentions, in a free-text question"""
    known = {obj.mark_id for obj in scene.objects}
    bracketed = sorted({int(m) for m in re.findall(r"\[(\d+)\]", question)} & known)
    if bracketed:
        return bracketed
    text = question.lower()
    hits = set()
    for obj in scene.objects:
        pattern = r"\b" + re.escape(obj.label.lower()) + r"(?:s|es)?\b"
        if re.search(pattern, text):
            hits.add(obj.mark_id)
    return sorted(hits)


def import_external_items(path: str, scene: SceneManifest) -> List[QAItem]:
    """Load externally sourced items for one scene; missing ids and marks are filled in"""
    items = []
    for number, record in _read_jsonl(path):
        if record.get("scene_id", scene.scene_id) != scene.scene_id:
            continue
        record = dict(record)
        record["scene_id"] = scene.scene_id
        category = str(record.get("category", "")).upper()
        record["category"] = category
        record.setdefault("qa_id", f"{scene.scene_id}-{category.lower()}-ext{number:04d}")
        if "answer_kind" not in record:
            if record.get("text_answer") is not None:
                record["answer_kind"] = AnswerKind.TEXT.value
            elif record.get("choices") is not None:
                record["answer_kind"] = AnswerKind.CHOICE.value
            else:
                record["answer_kind"] = AnswerKind.NUMERIC.value
        if not record.get("involved_marks"):
            record["involved_marks"] = ground_marks(str(record.get("question", "")), scene)
        try:
            item = QAItem.from_dict(record)
        except ParseError as e:
            raise ParseError(f"{path}:{number}: {e}") from e
        item.check_marks(scene)
        item.trace.setdefault("source", "external")
        items.append(item)
    logger.bind(scene_id=scene.scene_id).info("Imported {} external QA items from {}", len(items), path)
    return items
