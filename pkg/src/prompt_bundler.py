"""
Prompt Bundler
Assembles the model-facing input for one QA item: a filtered (and for relative direction,
rotated) BEV image, optional keyframe grids, object metadata text, guide prompt,
question and answer-format instruction
"""

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from PIL import Image

from .bev_renderer import BevCanvas, draw_marks, heading_rotation, render_bev, save_canvas
from .errors import IoError, MissingArtifact, ParseError, UnknownMarkId, ValidationError
from .keyframe_selector import DEFAULT_TILE_H, DEFAULT_TILE_W, stitch_grids
from .qa_generator import AnswerKind, QACategory, QAItem
from .scene_ingest import ObjectInstance, PointCloud, SceneManifest
from .spatial_core import Heading2D

GUIDE_PROMPT_VERSION = "2025.1"

SPATIAL_CATEGORIES = frozenset({
    QACategory.COUNT,
    QACategory.REL_DIRECTION,
    QACategory.REL_DISTANCE,
    QACategory.ABS_DISTANCE,
    QACategory.ROOM_SIZE,
    QACategory.ROUTE_PLAN,
})
REASONING_CATEGORIES = frozenset({QACategory.REL_DIRECTION, QACategory.ROUTE_PLAN})

REL_DIRECTION_GUIDE = (
    "The image is a bird's-eye view of the room with numbered marks on the objects.\n"
    "1. Find the mark of the object you are standing by and the mark of the object you are facing.\n"
    "2. The view is rotated so that the facing object is straight up from the standing object: "
    "up is your front, down is your back, the image's left is your left and its right is your right.\n"
    "3. Find the target mark and compare its horizontal and vertical offset from the standing mark.\n"
    "4. Pick the direction whose region contains the target."
)
ROUTE_PLAN_GUIDE = (
    "The image is a bird's-eye view of the room with numbered marks on the objects.\n"
    "1. Start at the first mark and face the second mark.\n"
    "2. Walk the route one step at a time. Before each step, compare the direction to the next mark "
    "with the direction you are currently facing.\n"
    "3. If it is roughly straight ahead, go forward; if it is to your right, turn right; "
    "if it is to your left, turn left.\n"
    "4. After each step you face the direction you just walked."
)

THINK_THEN_ANSWER_INSTRUCTION = (
    "Reason step by step between <think> and </think>, "
    "then give only the final answer between <answer> and </answer>."
)
SHORT_ANSWER_INSTRUCTIONS = {
    AnswerKind.CHOICE: "Answer with the letter of the correct option between <answer> and </answer>.",
    AnswerKind.NUMERIC: "Answer with a single number between <answer> and </answer>.",
    AnswerKind.TEXT: "Answer with a single word or short phrase between <answer> and </answer>.",
}
CHOICE_LETTERS = "ABCDEFGH"


class ImageRole(str, Enum):
    BEV = "BEV"
    KEYFRAME_GRID = "KEYFRAME_GRID"


class AnswerFormat(str, Enum):
    THINK_THEN_ANSWER = "THINK_THEN_ANSWER"
    SHORT_ANSWER = "SHORT_ANSWER"


@dataclass(frozen=True)
class BundleOptions:
    """Ablation switches and keyframe settings"""
    use_metadata: bool = True
    use_filter: bool = True
    use_rotation: bool = True
    use_guide: bool = True
    keyframes_for_spatial: bool = False
    tile_w: int = DEFAULT_TILE_W
    tile_h: int = DEFAULT_TILE_H


@dataclass
class SceneArtifacts:
    """Upstream outputs the bundler draws on for one scene"""
    scene: SceneManifest
    base_canvas: Optional[BevCanvas] = None  # unmarked, unrotated
    cloud: Optional[PointCloud] = None  # ceiling already removed
    keyframe_dir: Optional[str] = None
    keyframe_index: Optional[Dict[str, Any]] = None


@dataclass
class PromptBundle:
    qa_id: str
    category: QACategory
    images: List[Tuple[ImageRole, str]]
    metadata_text: str
    guide_text: Optional[str]
    question_text: str
    answer_format: AnswerFormat
    answer_instruction: str
    transform_sidecar: Dict[str, Any] = field(default_factory=dict)
    guide_version: str = GUIDE_PROMPT_VERSION

    def __post_init__(self):
        self.category = QACategory(self.category)
        self.answer_format = AnswerFormat(self.answer_format)
        self.images = [(ImageRole(role), path) for role, path in self.images]
        bev_count = sum(1 for role, _ in self.images if role == ImageRole.BEV)
        if bev_count != 1:
            raise ValidationError("images", f"{self.qa_id}: need exactly one BEV image, got {bev_count}")

    def image_paths(self, role: Optional[ImageRole] = None) -> List[str]:
        return [path for r, path in self.images if role is None or r == role]

    def to_dict(self, base_dir: Optional[str] = None) -> Dict[str, Any]:
        def rel(path: str) -> str:
            return os.path.relpath(path, base_dir).replace(os.sep, "/") if base_dir else path

        return {
            "qa_id": self.qa_id,
            "category": self.category.value,
            "images": [{"role": role.value, "path": rel(path)} for role, path in self.images],
            "metadata_text": self.metadata_text,
            "guide_text": self.guide_text,
            "guide_version": self.guide_version,
            "question_text": self.question_text,
            "answer_format": self.answer_format.value,
            "answer_instruction": self.answer_instruction,
            "transform_sidecar": self.transform_sidecar,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[str] = None) -> "PromptBundle":
        try:
            images = []
            for entry in data["images"]:
                path = entry["path"]
                if base_dir and not os.path.isabs(path):
                    path = os.path.normpath(os.path.join(base_dir, path))
                images.append((ImageRole(entry["role"]), path))
            return cls(
                qa_id=data["qa_id"],
                category=QACategory(data["category"]),
                images=images,
                metadata_text=data["metadata_text"],
                guide_text=data.get("guide_text"),
                question_text=data["question_text"],
                answer_format=AnswerFormat(data["answer_format"]),
                answer_instruction=data["answer_instruction"],
                transform_sidecar=data.get("transform_sidecar", {}),
                guide_version=data.get("guide_version", GUIDE_PROMPT_VERSION),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ParseError(f"malformed prompt bundle: {e}") from e

    @classmethod
    def from_file(cls, path: str) -> "PromptBundle":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"cannot read prompt bundle {path}: {e}") from e
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def _coord(value: float) -> str:
    text = f"{value:.2f}"
    return "0.00" if text == "-0.00" else text


def build_metadata_text(objects: Sequence[ObjectInstance], filter_ids: Optional[Iterable[int]] = None) -> str:
    """One line per object, ascending mark_id"""
    by_id = {obj.mark_id: obj for obj in objects}
    if filter_ids is None:
        keep = sorted(by_id)
    else:
        keep = sorted(set(filter_ids))
        for mark_id in keep:
            if mark_id not in by_id:
                raise UnknownMarkId(mark_id)
    lines = []
    for mark_id in keep:
        obj = by_id[mark_id]
        x, y, z = obj.obb.center
        lines.append(f"mark {mark_id}: {obj.label}, center=({_coord(x)}, {_coord(y)}, {_coord(z)}) m")
    return "\n".join(lines)


def build_guide_prompt(category: QACategory) -> Optional[str]:
    category = QACategory(category)
    if category == QACategory.REL_DIRECTION:
        return REL_DIRECTION_GUIDE
    if category == QACategory.ROUTE_PLAN:
        return ROUTE_PLAN_GUIDE
    return None


def answer_format_for(category: QACategory) -> AnswerFormat:
    if QACategory(category) in REASONING_CATEGORIES:
        return AnswerFormat.THINK_THEN_ANSWER
    return AnswerFormat.SHORT_ANSWER


def answer_instruction(answer_format: AnswerFormat, answer_kind: AnswerKind) -> str:
    if answer_format == AnswerFormat.THINK_THEN_ANSWER:
        return THINK_THEN_ANSWER_INSTRUCTION
    return SHORT_ANSWER_INSTRUCTIONS[AnswerKind(answer_kind)]


def format_question(item: QAItem) -> str:
    """Question text, with lettered options for choice items"""
    if item.answer_kind != AnswerKind.CHOICE:
        return item.question
    options = [f"{CHOICE_LETTERS[i]}. {choice}" for i, choice in enumerate(item.choices)]
    return item.question + "\nOptions:\n" + "\n".join(options)


def bundle_marks(item: QAItem, scene: SceneManifest, options: BundleOptions) -> List[int]:
    """Marks drawn and described for an item"""
    if not options.use_filter:
        return sorted(obj.mark_id for obj in scene.objects)
    return sorted(set(item.involved_marks))


def _item_heading(item: QAItem, scene: SceneManifest) -> Heading2D:
    standing = scene.object_by_id(int(item.trace["standing"]["mark_id"]))
    facing = scene.object_by_id(int(item.trace["facing"]["mark_id"]))
    if standing is None or facing is None:
        raise MissingArtifact(f"{item.qa_id}: standing/facing marks are missing from the scene")
    return Heading2D.from_points(standing.obb.center[:2], facing.obb.center[:2])


def _item_canvas(item: QAItem, artifacts: SceneArtifacts, options: BundleOptions) -> BevCanvas:
    scene_id = artifacts.scene.scene_id
    if artifacts.base_canvas is None:
        raise MissingArtifact(f"scene {scene_id}: BEV image has not been rendered")
    if item.category == QACategory.REL_DIRECTION and options.use_rotation:
        if artifacts.cloud is None:
            raise MissingArtifact(f"scene {scene_id}: point cloud needed to render a rotated BEV")
        rotation = heading_rotation(_item_heading(item, artifacts.scene))
        return render_bev(
            artifacts.cloud,
            resolution=artifacts.base_canvas.resolution,
            rotation_deg=rotation,
            margin_px=artifacts.base_canvas.margin_px,
        )
    return artifacts.base_canvas


def _keyframe_images(item: QAItem, artifacts: SceneArtifacts) -> List[np.ndarray]:
    if artifacts.keyframe_dir is None or artifacts.keyframe_index is None:
        raise MissingArtifact(f"scene {artifacts.scene.scene_id}: keyframes have not been selected")
    wanted = set(item.involved_marks)
    images = []
    for entry in artifacts.keyframe_index.get("keyframes", []):
        if wanted.isdisjoint(entry["covered"]):
            continue
        path = os.path.join(artifacts.keyframe_dir, f"frame_{int(entry['frame_index']):06d}.png")
        try:
            with Image.open(path) as image:
                images.append(np.asarray(image.convert("RGB")).copy())
        except OSError as e:
            raise MissingArtifact(f"keyframe image {path} is unreadable: {e}") from e
    return images


def assemble_bundle(
    item: QAItem,
    artifacts: SceneArtifacts,
    out_dir: str,
    options: Optional[BundleOptions] = None,
) -> PromptBundle:
    """Build the bundle for one item, writing its images under out_dir"""
    options = options or BundleOptions()
    scene = artifacts.scene
    log = logger.bind(scene_id=scene.scene_id, qa_id=item.qa_id)
    item.check_marks(scene)
    marks = bundle_marks(item, scene, options)

    canvas = draw_marks(_item_canvas(item, artifacts, options), scene.objects, marks)
    os.makedirs(out_dir, exist_ok=True)
    bev_path = os.path.join(out_dir, f"{item.qa_id}_bev.png")
    save_canvas(canvas, bev_path)
    sidecar = canvas.transform_record()
    sidecar["marks"] = sorted(canvas.marks)
    images: List[Tuple[ImageRole, str]] = [(ImageRole.BEV, bev_path)]

    wants_keyframes = item.category not in SPATIAL_CATEGORIES or options.keyframes_for_spatial
    if wants_keyframes:
        frames = _keyframe_images(item, artifacts)
        for k, grid in enumerate(stitch_grids(frames, options.tile_w, options.tile_h) if frames else []):
            grid_path = os.path.join(out_dir, f"{item.qa_id}_grid_{k:02d}.png")
            Image.fromarray(grid).save(grid_path, format="PNG")
            images.append((ImageRole.KEYFRAME_GRID, grid_path))
        if not frames:
            log.warning("No keyframe shows marks {}", sorted(item.involved_marks))

    metadata_text = build_metadata_text(scene.objects, marks) if options.use_metadata else ""
    drawn = set(canvas.marks)
    if options.use_metadata and not set(marks) <= drawn:
        raise ValidationError("metadata_text", f"{item.qa_id}: metadata references undrawn marks")

    answer_format = answer_format_for(item.category)
    bundle = PromptBundle(
        qa_id=item.qa_id,
        category=item.category,
        images=images,
        metadata_text=metadata_text,
        guide_text=build_guide_prompt(item.category) if options.use_guide else None,
        question_text=format_question(item),
        answer_format=answer_format,
        answer_instruction=answer_instruction(answer_format, item.answer_kind),
        transform_sidecar=sidecar,
    )
    log.debug("Bundled {} image(s)", len(images))
    return bundle


def write_bundle(bundle: PromptBundle, out_dir: str) -> str:
    """Write <qa_id>.json with image paths relative to out_dir"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{bundle.qa_id}.json")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(bundle.to_dict(base_dir=out_dir), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write bundle {path}: {e}") from e
    return path


def write_bundle_index(bundle_paths: Sequence[str], out_path: str) -> str:
    """Shard-level index listing every bundle document"""
    base_dir = os.path.dirname(os.path.abspath(out_path))
    entries = []
    for path in bundle_paths:
        entries.append({
            "qa_id": os.path.splitext(os.path.basename(path))[0],
            "path": os.path.relpath(os.path.abspath(path), base_dir).replace(os.sep, "/"),
        })
    index = {"guide_version": GUIDE_PROMPT_VERSION, "bundles": entries}
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_path


def read_bundle_index(index_path: str) -> List[PromptBundle]:
    try:
        with open(index_path, "r", encoding="utf-8") as f:
            index = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read bundle index {index_path}: {e}") from e
    base_dir = os.path.dirname(os.path.abspath(index_path))
    return [PromptBundle.from_file(os.path.join(base_dir, entry["path"])) for entry in index.get("bundles", [])]
