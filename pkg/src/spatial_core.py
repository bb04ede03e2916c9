"""
Spatial Core
Pure geometry: camera projection, box corners, distances, planar angles,
direction bins, footprints and segment clearance.

Conventions: world is Z-up; on the XY plane X points right and Y forward.
Planar angles are clockwise-positive when viewed from above, so "right" is positive.
"""

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
import shapely as sl
from scipy.spatial import ConvexHull

from .errors import AmbiguousAngle, DegenerateVector
from .scene_ingest import FrameRecord, ObjectInstance, OrientedBox

VECTOR_EPS = 1e-9
GEOMETRY_EPS = 1e-6

# Corner sign order: x varies slowest, z fastest
CORNER_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))

Polygon = np.ndarray  # (K, 2), counterclockwise


class DirectionScheme(str, Enum):
    FOUR_WAY = "FOUR_WAY"
    QUADRANT = "QUADRANT"


DIRECTION_LABELS = {
    DirectionScheme.FOUR_WAY: ("front", "left", "right", "back"),
    DirectionScheme.QUADRANT: ("front-left", "front-right", "back-left", "back-right"),
}


@dataclass(frozen=True)
class Heading2D:
    """Agent position and unit facing direction on the XY plane"""
    origin: Tuple[float, float]
    direction: Tuple[float, float]

    def __post_init__(self):
        norm = math.hypot(*self.direction)
        if abs(norm - 1.0) > VECTOR_EPS:
            raise DegenerateVector(f"heading direction must be unit length, got norm {norm}")

    @classmethod
    def from_points(cls, origin: Sequence[float], toward: Sequence[float]) -> "Heading2D":
        dx, dy = float(toward[0]) - float(origin[0]), float(toward[1]) - float(origin[1])
        norm = math.hypot(dx, dy)
        if norm < VECTOR_EPS:
            raise DegenerateVector("heading origin and target coincide")
        return cls(origin=(float(origin[0]), float(origin[1])), direction=(dx / norm, dy / norm))


# ---------------------------------------------------------------------------
# Camera projection
# ---------------------------------------------------------------------------

def project_point(p_world: Sequence[float], frame: FrameRecord) -> Optional[Tuple[float, float, float]]:
    """Pinhole projection of a world point; None when at or behind the camera"""
    extrinsic = frame.extrinsic_matrix
    rotation, translation = extrinsic[:3, :3], extrinsic[:3, 3]
    x, y, z = rotation.T @ (np.asarray(p_world, dtype=np.float64) - translation)
    if z <= GEOMETRY_EPS:
        return None
    fx, fy, cx, cy = frame.intrinsics
    return (fx * x / z + cx, fy * y / z + cy, float(z))


def unproject_pixel(u: float, v: float, z_cam: float, frame: FrameRecord) -> np.ndarray:
    """World point seen at pixel (u, v) with camera depth z_cam"""
    fx, fy, cx, cy = frame.intrinsics
    camera_point = np.array([(u - cx) * z_cam / fx, (v - cy) * z_cam / fy, z_cam])
    extrinsic = frame.extrinsic_matrix
    return extrinsic[:3, :3] @ camera_point + extrinsic[:3, 3]


# ---------------------------------------------------------------------------
# Boxes and distances
# ---------------------------------------------------------------------------

def obb_corners(box: OrientedBox) -> np.ndarray:
    """8x3 corners: center + R·(±ex/2, ±ey/2, ±ez/2) in CORNER_SIGNS order"""
    half = CORNER_SIGNS * (box.extents_array / 2.0)
    return box.center_array + half @ box.rotation_matrix.T


def min_corner_distance(a: OrientedBox, b: OrientedBox) -> float:
    """Minimum Euclidean distance over the 8x8 corner pairs"""
    ca, cb = obb_corners(a), obb_corners(b)
    dx = ca[:, None, 0] - cb[None, :, 0]
    dy = ca[:, None, 1] - cb[None, :, 1]
    dz = ca[:, None, 2] - cb[None, :, 2]
    return float(np.sqrt(dx * dx + dy * dy + dz * dz).min())


def center_distance(a: ObjectInstance, b: ObjectInstance) -> float:
    d = a.obb.center_array - b.obb.center_array
    return float(math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))


# ---------------------------------------------------------------------------
# Planar angles and direction bins
# ---------------------------------------------------------------------------

def signed_angle(from_vec: Sequence[float], to_vec: Sequence[float]) -> float:
    """Clockwise-positive angle in degrees from `from_vec` to `to_vec`, in (-180, 180]"""
    fx, fy = float(from_vec[0]), float(from_vec[1])
    tx, ty = float(to_vec[0]), float(to_vec[1])
    if math.hypot(fx, fy) < VECTOR_EPS or math.hypot(tx, ty) < VECTOR_EPS:
        raise DegenerateVector("signed_angle needs two nonzero vectors")
    angle = math.degrees(math.atan2(fy * tx - fx * ty, fx * tx + fy * ty))
    if angle <= -180.0:
        angle += 360.0
    return angle


def direction_bin(angle: float, scheme: DirectionScheme = DirectionScheme.FOUR_WAY) -> str:
    """Discretize a signed angle into a direction label"""
    if not -180.0 < angle <= 180.0:
        raise ValueError(f"angle must be in (-180, 180], got {angle}")
    scheme = DirectionScheme(scheme)
    if scheme == DirectionScheme.FOUR_WAY:
        if -45.0 <= angle < 45.0:
            return "front"
        if 45.0 <= angle < 135.0:
            return "right"
        if -135.0 <= angle < -45.0:
            return "left"
        return "back"

    if angle in (0.0, 90.0, -90.0, 180.0):
        raise AmbiguousAngle(f"angle {angle} lies on a quadrant boundary")
    if 0.0 < angle < 90.0:
        return "front-right"
    if angle > 90.0:
        return "back-right"
    if angle < -90.0:
        return "back-left"
    return "front-left"


# ---------------------------------------------------------------------------
# Footprints and clearance
# ---------------------------------------------------------------------------

def convex_hull_2d(points: np.ndarray) -> Polygon:
    """Hull vertices, counterclockwise, collinear points dropped"""
    points = np.asarray(points, dtype=np.float64)
    hull = ConvexHull(points)
    return points[hull.vertices]


def footprint_polygon(box: OrientedBox) -> Polygon:
    """Convex hull of the box corners projected to XY (4 to 8 vertices)"""
    return convex_hull_2d(obb_corners(box)[:, :2])


def segment_clearance(seg: Tuple[Sequence[float], Sequence[float]], poly: Polygon) -> float:
    """0 if the segment touches or enters the polygon, else the minimum gap"""
    line = sl.LineString([tuple(seg[0])[:2], tuple(seg[1])[:2]])
    return float(line.distance(sl.Polygon(poly)))
