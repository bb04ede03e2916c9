"""
Keyframe Selector
First-fit visibility cover over sampled RGB-D frames, with an occlusion-aware depth test,
plus stitching of the selected frames into compact grids
"""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import cv2
import numpy as np
from loguru import logger
from PIL import Image

from .bev_renderer import paint_marks
from .errors import TooManyTiles, UnknownMarkId, ValidationError
from .scene_ingest import DepthImage, FrameRecord, ObjectInstance, SceneManifest, load_depth, load_rgb
from .spatial_core import project_point

DEFAULT_TILE_W = 256
DEFAULT_TILE_H = 246
MAX_TILES = 8
GRID_FILL = (128, 128, 128)

DepthLoader = Callable[[FrameRecord], DepthImage]
RgbLoader = Callable[[FrameRecord], np.ndarray]
VisibilityFn = Callable[[ObjectInstance, FrameRecord, DepthImage], bool]


@dataclass(frozen=True)
class VisibilityParams:
    sample_count: int = 32
    occlusion_tolerance: float = 0.15
    border_margin: int = 8

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValidationError("sample_count", f"must be >= 1, got {self.sample_count}")
        if self.occlusion_tolerance <= 0:
            raise ValidationError("occlusion_tolerance", f"must be > 0, got {self.occlusion_tolerance}")


@dataclass
class SelectedFrame:
    frame_index: int
    newly_covered: List[int]
    image: np.ndarray  # marked RGB


@dataclass
class KeyframeResult:
    selected: List[SelectedFrame] = field(default_factory=list)
    covered: Set[int] = field(default_factory=set)
    uncovered: Set[int] = field(default_factory=set)

    def to_index(self) -> Dict[str, object]:
        """Per-scene keyframe index: frame_index -> newly covered mark ids"""
        return {
            "keyframes": [
                {"frame_index": s.frame_index, "covered": sorted(s.newly_covered)} for s in self.selected
            ],
            "covered": sorted(self.covered),
            "uncovered": sorted(self.uncovered),
        }


def keyframe_mark_radius(width: int, height: int) -> int:
    return max(8, round(0.012 * max(width, height)))


def visibility_test(obj: ObjectInstance, frame: FrameRecord, depth: DepthImage, params: VisibilityParams) -> bool:
    """Center projects inside the frame, has valid depth, and is not behind that depth by more than τ"""
    projected = project_point(obj.obb.center, frame)
    if projected is None:
        return False
    u, v, z_cam = projected
    margin = params.border_margin
    if not (margin <= u < frame.width - margin and margin <= v < frame.height - margin):
        return False
    if depth.shape[:2] != (frame.height, frame.width):
        return False
    d = float(depth[int(math.floor(v)), int(math.floor(u))])
    if d <= 0.0:
        return False
    return z_cam <= d + params.occlusion_tolerance


def sample_frames(frames: Sequence[FrameRecord], n: int) -> List[FrameRecord]:
    """Up to n frames spread uniformly over frame_index order"""
    ordered = sorted(frames, key=lambda f: f.frame_index)
    if len(ordered) <= n:
        return ordered
    picks = np.unique(np.round(np.linspace(0, len(ordered) - 1, n)).astype(int))
    return [ordered[i] for i in picks]


class KeyframeSelector:
    """
    Selects keyframes for a set of objects.
    Loaders and the visibility predicate are injectable for testability.
    """

    def __init__(
        self,
        params: Optional[VisibilityParams] = None,
        depth_loader: Optional[DepthLoader] = None,
        rgb_loader: Optional[RgbLoader] = None,
        visibility_fn: Optional[VisibilityFn] = None,
    ):
        self.params = params or VisibilityParams()
        self.depth_loader = depth_loader
        self.rgb_loader = rgb_loader or load_rgb
        self.visibility_fn = visibility_fn

    def _is_visible(self, obj: ObjectInstance, frame: FrameRecord, depth: DepthImage) -> bool:
        if self.visibility_fn is not None:
            return self.visibility_fn(obj, frame, depth)
        return visibility_test(obj, frame, depth, self.params)

    def select(self, scene: SceneManifest, objects: Sequence[ObjectInstance]) -> KeyframeResult:
        for obj in objects:
            if scene.object_by_id(obj.mark_id) is None:
                raise UnknownMarkId(obj.mark_id)
        depth_loader = self.depth_loader or (lambda frame: load_depth(frame, scene.depth_scale))

        result = KeyframeResult()
        requested = [obj.mark_id for obj in objects]
        for frame in sample_frames(scene.frames, self.params.sample_count):
            if len(result.covered) == len(set(requested)):
                break
            depth = depth_loader(frame)
            newly: List[ObjectInstance] = [
                obj for obj in objects
                if obj.mark_id not in result.covered and self._is_visible(obj, frame, depth)
            ]
            if not newly:
                continue
            marks: List[Tuple[int, Tuple[float, float]]] = []
            for obj in newly:
                result.covered.add(obj.mark_id)
                projected = project_point(obj.obb.center, frame)
                if projected is not None:
                    marks.append((obj.mark_id, (projected[0], projected[1])))
            image = paint_marks(self.rgb_loader(frame), marks, keyframe_mark_radius(frame.width, frame.height))
            result.selected.append(SelectedFrame(
                frame_index=frame.frame_index,
                newly_covered=[obj.mark_id for obj in newly],
                image=image,
            ))
        result.uncovered = set(requested) - result.covered
        logger.bind(scene_id=scene.scene_id).debug(
            "Selected {} keyframes, {} uncovered", len(result.selected), len(result.uncovered))
        return result


def select_keyframes(
    scene: SceneManifest,
    objects: Sequence[ObjectInstance],
    params: Optional[VisibilityParams] = None,
) -> KeyframeResult:
    return KeyframeSelector(params=params).select(scene, objects)


def stitch_grid(images: Sequence[np.ndarray], tile_w: int = DEFAULT_TILE_W, tile_h: int = DEFAULT_TILE_H) -> np.ndarray:
    """Resize to tiles and lay out row-major: ≤2 images as 1x2, ≤8 as 2x4, gray padding"""
    count = len(images)
    if count > MAX_TILES:
        raise TooManyTiles(f"{count} images do not fit one grid (max {MAX_TILES})")
    if count < 1:
        raise ValueError("stitch_grid needs at least one image")
    rows, cols = (1, 2) if count <= 2 else (2, 4)
    grid = np.empty((rows * tile_h, cols * tile_w, 3), dtype=np.uint8)
    grid[:] = GRID_FILL
    for i, image in enumerate(images):
        tile = cv2.resize(np.ascontiguousarray(image), (tile_w, tile_h), interpolation=cv2.INTER_AREA)
        r, c = divmod(i, cols)
        grid[r * tile_h:(r + 1) * tile_h, c * tile_w:(c + 1) * tile_w] = tile
    return grid


def stitch_grids(images: Sequence[np.ndarray], tile_w: int = DEFAULT_TILE_W, tile_h: int = DEFAULT_TILE_H) -> List[np.ndarray]:
    """Split into chunks of at most 8 and stitch each"""
    return [stitch_grid(images[i:i + MAX_TILES], tile_w, tile_h) for i in range(0, len(images), MAX_TILES)]


def write_keyframes(result: KeyframeResult, out_dir: str, tile_w: int = DEFAULT_TILE_W, tile_h: int = DEFAULT_TILE_H) -> List[str]:
    """Write marked keyframes, stitched grids and the keyframe index; returns the grid paths"""
    os.makedirs(out_dir, exist_ok=True)
    for selected in result.selected:
        Image.fromarray(selected.image).save(os.path.join(out_dir, f"frame_{selected.frame_index:06d}.png"), format="PNG")
    grid_paths = []
    if result.selected:
        for i, grid in enumerate(stitch_grids([s.image for s in result.selected], tile_w, tile_h)):
            path = os.path.join(out_dir, f"grid_{i:02d}.png")
            Image.fromarray(grid).save(path, format="PNG")
            grid_paths.append(path)
    index = result.to_index()
    index["grids"] = [os.path.basename(p) for p in grid_paths]
    with open(os.path.join(out_dir, "keyframes.json"), "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return grid_paths
