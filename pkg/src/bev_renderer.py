"""
BEV Renderer
Renders ceiling-free top-down views of a point cloud and draws numbered object marks
"""

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from PIL import Image, ImageDraw, ImageFont

from .errors import EmptyCloud, ParseError, UnknownMarkId, ValidationError
from .scene_ingest import ObjectInstance, PointCloud
from .spatial_core import Heading2D

DEFAULT_RESOLUTION = 640
DEFAULT_MARGIN_PX = 16
DEFAULT_KEEP_FRACTION = 0.92
FLAT_SPAN_M = 0.1
MIN_HALF_EXTENT_M = 5e-4

BACKGROUND = (255, 255, 255)
DEFAULT_POINT_COLOR = (128, 128, 128)

# tab10
MARK_PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
)

RGB = Tuple[int, int, int]


@dataclass(frozen=True)
class MarkStyle:
    radius_px: int
    fill: RGB
    text: RGB
    outline: RGB

    def __post_init__(self):
        if self.radius_px < 4:
            raise ValidationError("radius_px", f"must be >= 4, got {self.radius_px}")


@dataclass
class BevCanvas:
    """Top-down raster plus the world↔pixel transform used to make it"""
    image: np.ndarray  # (res, res, 3) uint8
    world_to_pixel: np.ndarray  # 2x3 affine, meters -> px
    rotation_deg: float
    meters_per_pixel: float
    margin_px: int
    marks: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return int(self.image.shape[0])

    def to_pixels(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        return xy @ self.world_to_pixel[:, :2].T + self.world_to_pixel[:, 2]

    def to_world(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        linear = self.world_to_pixel[:, :2]
        return (uv - self.world_to_pixel[:, 2]) @ np.linalg.inv(linear).T

    def transform_record(self) -> Dict[str, object]:
        return {
            "resolution": self.resolution,
            "meters_per_pixel": self.meters_per_pixel,
            "rotation_deg": self.rotation_deg,
            "margin_px": self.margin_px,
            "world_to_pixel": [[float(v) for v in row] for row in self.world_to_pixel],
            "translation": [float(v) for v in self.world_to_pixel[:, 2]],
        }


def ceiling_cutoff(cloud: PointCloud, keep_fraction: float = DEFAULT_KEEP_FRACTION) -> Optional[float]:
    """Height above which points count as ceiling; None for flat clouds"""
    if len(cloud) == 0:
        raise EmptyCloud("cannot remove the ceiling of an empty cloud")
    z1, z99 = np.percentile(cloud.points[:, 2], [1.0, 99.0])
    if z99 - z1 < FLAT_SPAN_M:
        return None
    return float(z1 + keep_fraction * (z99 - z1))


def remove_ceiling(cloud: PointCloud, keep_fraction: float = DEFAULT_KEEP_FRACTION) -> PointCloud:
    """Drop points above the robust ceiling cut"""
    cutoff = ceiling_cutoff(cloud, keep_fraction)
    if cutoff is None:
        return cloud
    kept = cloud.subset(cloud.points[:, 2] <= cutoff)
    logger.debug("Ceiling cut at {:.3f} m kept {}/{} points", cutoff, len(kept), len(cloud))
    return kept


def _rotation_2d(rotation_deg: float) -> np.ndarray:
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def render_bev(
    cloud: PointCloud,
    resolution: int = DEFAULT_RESOLUTION,
    rotation_deg: float = 0.0,
    margin_px: int = DEFAULT_MARGIN_PX,
) -> BevCanvas:
    """Orthographic XY splat of the cloud, rotated counterclockwise about its XY centroid"""
    if len(cloud) == 0:
        raise EmptyCloud("cannot render an empty cloud")
    xy = cloud.points[:, :2]
    centroid = xy.mean(axis=0)
    rotation = _rotation_2d(rotation_deg)
    rotated = (xy - centroid) @ rotation.T

    half_extent = max(float(np.abs(rotated).max()), MIN_HALF_EXTENT_M)
    meters_per_pixel = 2.0 * half_extent / (resolution - 2 * margin_px)

    # u grows with rotated x, v grows against rotated y; centroid lands on the image center
    linear = np.diag([1.0 / meters_per_pixel, -1.0 / meters_per_pixel]) @ rotation
    offset = np.array([resolution / 2.0, resolution / 2.0]) - linear @ centroid
    world_to_pixel = np.hstack([linear, offset[:, None]])

    uv = xy @ linear.T + offset
    cols = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, resolution - 1)
    rows = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, resolution - 1)
    flat = rows * resolution + cols

    # Highest z per pixel wins; ties keep the later point
    order = np.lexsort((cloud.points[:, 2], flat))
    flat_sorted = flat[order]
    last = np.append(flat_sorted[1:] != flat_sorted[:-1], True)
    winners = order[last]

    colors = cloud.colors if cloud.colors is not None else np.tile(
        np.array(DEFAULT_POINT_COLOR, dtype=np.uint8), (len(cloud), 1))
    image = np.empty((resolution * resolution, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    image[flat[winners]] = colors[winners]

    return BevCanvas(
        image=image.reshape(resolution, resolution, 3),
        world_to_pixel=world_to_pixel,
        rotation_deg=float(rotation_deg),
        meters_per_pixel=meters_per_pixel,
        margin_px=margin_px,
    )


def heading_rotation(heading: Heading2D) -> float:
    """Counterclockwise world rotation that points the heading at the top of the image"""
    dx, dy = heading.direction
    angle = math.degrees(math.atan2(dx, dy))
    if angle <= -180.0:
        angle += 360.0
    return angle


def mark_radius(resolution: int) -> int:
    return max(8, round(0.012 * resolution))


def mark_style(mark_id: int, radius_px: int) -> MarkStyle:
    fill = MARK_PALETTE[mark_id % len(MARK_PALETTE)]
    luminance = 0.299 * fill[0] + 0.587 * fill[1] + 0.114 * fill[2]
    text = (0, 0, 0) if luminance > 150 else (255, 255, 255)
    return MarkStyle(radius_px=radius_px, fill=fill, text=text, outline=(0, 0, 0))


def paint_marks(image: np.ndarray, marks: Iterable[Tuple[int, Tuple[float, float]]], radius_px: int) -> np.ndarray:
    """Draw numbered filled circles on a copy of an RGB array, ascending mark_id"""
    canvas = Image.fromarray(image)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default(size=max(8, int(radius_px * 1.2)))
    for mark_id, (u, v) in sorted(marks, key=lambda m: m[0]):
        style = mark_style(mark_id, radius_px)
        r = style.radius_px
        draw.ellipse([u - r, v - r, u + r, v + r], fill=style.fill, outline=style.outline, width=1)
        text = str(mark_id)
        left, top, right, bottom = draw.textbbox((0, 0), text, font=font)
        draw.text((u - (left + right) / 2.0, v - (top + bottom) / 2.0), text, fill=style.text, font=font)
    return np.asarray(canvas).copy()


def draw_marks(
    canvas: BevCanvas,
    objects: Sequence[ObjectInstance],
    filter_ids: Optional[Iterable[int]] = None,
) -> BevCanvas:
    """Draw marks for the filtered objects at their OBB centers; returns a new canvas"""
    by_id = {obj.mark_id: obj for obj in objects}
    if filter_ids is None:
        keep = sorted(by_id)
    else:
        keep = sorted(set(filter_ids))
        for mark_id in keep:
            if mark_id not in by_id:
                raise UnknownMarkId(mark_id)

    marks: Dict[int, Tuple[float, float]] = {}
    for mark_id in keep:
        u, v = canvas.to_pixels(by_id[mark_id].obb.center_array[:2])[0]
        marks[mark_id] = (float(u), float(v))

    image = paint_marks(canvas.image, marks.items(), mark_radius(canvas.resolution))
    return replace(canvas, image=image, marks={**canvas.marks, **marks})


def save_canvas(canvas: BevCanvas, png_path: str, sidecar_path: Optional[str] = None) -> str:
    """Write the raster as PNG and the transform + mark log as a JSON sidecar"""
    os.makedirs(os.path.dirname(os.path.abspath(png_path)), exist_ok=True)
    Image.fromarray(canvas.image).save(png_path, format="PNG")
    sidecar_path = sidecar_path or os.path.splitext(png_path)[0] + ".json"
    record = canvas.transform_record()
    record["marks"] = {str(k): [u, v] for k, (u, v) in sorted(canvas.marks.items())}
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return sidecar_path


def load_canvas(png_path: str, sidecar_path: Optional[str] = None) -> BevCanvas:
    sidecar_path = sidecar_path or os.path.splitext(png_path)[0] + ".json"
    try:
        with Image.open(png_path) as image:
            raster = np.asarray(image.convert("RGB")).copy()
        with open(sidecar_path, "r", encoding="utf-8") as f:
            record = json.load(f)
        return BevCanvas(
            image=raster,
            world_to_pixel=np.asarray(record["world_to_pixel"], dtype=np.float64),
            rotation_deg=float(record["rotation_deg"]),
            meters_per_pixel=float(record["meters_per_pixel"]),
            margin_px=int(record["margin_px"]),
            marks={int(k): (float(u), float(v)) for k, (u, v) in record.get("marks", {}).items()},
        )
    except (OSError, KeyError, ValueError) as e:
        raise ParseError(f"cannot load BEV canvas {png_path}: {e}") from e
