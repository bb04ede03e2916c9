"""
Synthetic Scene
Deterministic furnished-room fixture: a colored PLY cloud, a Z-up manifest with labeled
boxes, and posed RGB / 16-bit depth frames ray-cast against the room and its furniture
"""

import json
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import cv2
import numpy as np
from loguru import logger
from PIL import Image

from .scene_ingest import PointCloud, write_point_cloud

ROOM = (6.0, 5.0, 2.7)  # x, y, z extents in meters
DEPTH_SCALE = 0.001
IMAGE_W, IMAGE_H = 320, 240
FOCAL = 240.0
FRAME_COUNT = 24
CLOUD_SPACING = 0.05
OBJECT_SPACING = 0.03

FLOOR_COLOR = (176, 150, 118)
WALL_COLOR = (222, 220, 208)
CEILING_COLOR = (246, 246, 246)
LABEL_COLORS: Dict[str, Tuple[int, int, int]] = {
    "sofa": (70, 90, 150),
    "table": (140, 100, 60),
    "chair": (190, 140, 80),
    "tv": (30, 30, 35),
    "fridge": (200, 205, 210),
    "sink": (160, 170, 180),
    "lamp": (230, 200, 90),
    "cabinet": (120, 80, 50),
    "plant": (60, 140, 60),
}


@dataclass(frozen=True)
class FurnitureSpec:
    mark_id: int
    label: str
    center: Tuple[float, float, float]
    extents: Tuple[float, float, float]
    yaw_deg: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        t = math.radians(self.yaw_deg)
        c, s = math.cos(t), math.sin(t)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


FURNITURE: Tuple[FurnitureSpec, ...] = (
    FurnitureSpec(1, "sofa", (1.2, 4.2, 0.4), (2.0, 0.9, 0.8)),
    FurnitureSpec(2, "table", (3.0, 2.5, 0.375), (1.2, 0.8, 0.75), 15.0),
    FurnitureSpec(3, "chair", (3.0, 1.6, 0.45), (0.5, 0.5, 0.9)),
    FurnitureSpec(4, "chair", (3.0, 3.4, 0.45), (0.5, 0.5, 0.9), 180.0),
    FurnitureSpec(5, "tv", (0.15, 2.0, 1.2), (0.1, 1.2, 0.7)),
    FurnitureSpec(6, "fridge", (5.6, 0.45, 0.9), (0.7, 0.7, 1.8)),
    FurnitureSpec(7, "sink", (4.3, 0.3, 0.45), (0.8, 0.5, 0.9)),
    FurnitureSpec(8, "lamp", (0.3, 3.3, 0.8), (0.35, 0.35, 1.6)),
    FurnitureSpec(9, "cabinet", (5.7, 3.5, 0.5), (0.5, 1.2, 1.0)),
    FurnitureSpec(10, "plant", (1.5, 0.5, 0.4), (0.4, 0.4, 0.8)),
)


def _grid(width: float, height: float, spacing: float) -> np.ndarray:
    u = np.arange(spacing / 2.0, width, spacing)
    v = np.arange(spacing / 2.0, height, spacing)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def _floor_color(xy: np.ndarray) -> np.ndarray:
    """Checkered floor so the BEV shows texture"""
    parity = (np.floor(xy[:, 0] / 0.5) + np.floor(xy[:, 1] / 0.5)) % 2
    colors = np.tile(np.array(FLOOR_COLOR, dtype=np.int32), (len(xy), 1))
    colors[parity == 1] -= 24
    return colors


def _room_points() -> Tuple[np.ndarray, np.ndarray]:
    lx, ly, lz = ROOM
    points, colors = [], []
    floor = _grid(lx, ly, CLOUD_SPACING)
    points.append(np.column_stack([floor, np.zeros(len(floor))]))
    colors.append(_floor_color(floor))
    points.append(np.column_stack([floor, np.full(len(floor), lz)]))
    colors.append(np.tile(CEILING_COLOR, (len(floor), 1)))
    for fixed_axis, value, span in ((0, 0.0, ly), (0, lx, ly), (1, 0.0, lx), (1, ly, lx)):
        wall = _grid(span, lz, CLOUD_SPACING)
        pts = np.empty((len(wall), 3))
        pts[:, fixed_axis] = value
        pts[:, 1 - fixed_axis] = wall[:, 0]
        pts[:, 2] = wall[:, 1]
        points.append(pts)
        colors.append(np.tile(WALL_COLOR, (len(wall), 1)))
    return np.vstack(points), np.vstack(colors)


def _box_surface(spec: FurnitureSpec) -> np.ndarray:
    half = np.asarray(spec.extents) / 2.0
    local = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        face = _grid(spec.extents[a], spec.extents[b], OBJECT_SPACING) - half[[a, b]]
        for sign in (-1.0, 1.0):
            pts = np.empty((len(face), 3))
            pts[:, axis] = sign * half[axis]
            pts[:, a], pts[:, b] = face[:, 0], face[:, 1]
            local.append(pts)
    return np.vstack(local) @ spec.rotation.T + np.asarray(spec.center)


def build_cloud(seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    points, colors = _room_points()
    all_points, all_colors = [points], [colors]
    for spec in FURNITURE:
        surface = _box_surface(spec)
        all_points.append(surface)
        all_colors.append(np.tile(LABEL_COLORS[spec.label], (len(surface), 1)))
    points = np.vstack(all_points)
    colors = np.vstack(all_colors) + rng.integers(-6, 7, size=(len(points), 3))
    points = points + rng.uniform(-0.004, 0.004, size=points.shape)
    return PointCloud(points=points, colors=np.clip(colors, 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Cameras and ray casting
# ---------------------------------------------------------------------------

def look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world 4x4 with x right, y down, z forward"""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    extrinsic = np.eye(4)
    extrinsic[:3, 0], extrinsic[:3, 1], extrinsic[:3, 2] = right, down, forward
    extrinsic[:3, 3] = eye
    return extrinsic


def camera_path(count: int = FRAME_COUNT) -> List[np.ndarray]:
    """Cameras on an ellipse around the room center, looking across the room"""
    cx, cy = ROOM[0] / 2.0, ROOM[1] / 2.0
    poses = []
    for i in range(count):
        theta = 2.0 * math.pi * i / count
        eye = np.array([cx + 2.0 * math.cos(theta), cy + 1.6 * math.sin(theta), 1.5])
        target = np.array([cx - 1.0 * math.cos(theta + 0.8), cy - 1.0 * math.sin(theta + 0.8), 0.6])
        poses.append(look_at(eye, target))
    return poses


def _shade(color: Tuple[int, int, int], factor: float) -> np.ndarray:
    return np.clip(np.asarray(color, dtype=np.float64) * factor, 0, 255)


def render_frame(extrinsic: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ray-cast one RGB image and its camera-z depth in meters"""
    u, v = np.meshgrid(np.arange(IMAGE_W) + 0.5, np.arange(IMAGE_H) + 0.5)
    rays_cam = np.stack([(u - IMAGE_W / 2.0) / FOCAL, (v - IMAGE_H / 2.0) / FOCAL, np.ones_like(u)], axis=-1)
    rays = rays_cam.reshape(-1, 3) @ extrinsic[:3, :3].T
    origin = extrinsic[:3, 3]

    # Room interior: nearest exit plane; t is camera z because rays have unit z in camera frame
    room = np.asarray(ROOM)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(rays > 0, room, 0.0)
        t_axis = np.where(np.abs(rays) > 1e-12, (bound - origin) / rays, np.inf)
    t_axis[t_axis < 0] = np.inf
    depth = t_axis.min(axis=1)
    axis = t_axis.argmin(axis=1)
    hit = origin + rays * depth[:, None]
    image = np.empty((len(rays), 3))
    image[:] = WALL_COLOR
    floor = (axis == 2) & (rays[:, 2] < 0)
    ceiling = (axis == 2) & (rays[:, 2] > 0)
    image[floor] = _floor_color(hit[floor, :2])
    image[ceiling] = CEILING_COLOR
    image[axis == 0] = _shade(WALL_COLOR, 0.92)

    for spec in FURNITURE:
        rotation = spec.rotation
        half = np.asarray(spec.extents) / 2.0
        o_local = rotation.T @ (origin - np.asarray(spec.center))
        d_local = rays @ rotation
        d_local = np.where(np.abs(d_local) < 1e-12, 1e-12, d_local)
        t1 = (-half - o_local) / d_local
        t2 = (half - o_local) / d_local
        t_near = np.minimum(t1, t2)
        t_far = np.maximum(t1, t2)
        entry = t_near.max(axis=1)
        exit_ = t_far.min(axis=1)
        closer = (exit_ >= entry) & (entry > 0) & (entry < depth)
        if not closer.any():
            continue
        depth[closer] = entry[closer]
        face = t_near[closer].argmax(axis=1)
        factors = np.array([0.8, 0.65, 1.0])[face]
        image[closer] = _shade(LABEL_COLORS[spec.label], 1.0)[None, :] * factors[:, None]

    rgb = np.round(image).astype(np.uint8).reshape(IMAGE_H, IMAGE_W, 3)
    return rgb, depth.reshape(IMAGE_H, IMAGE_W)


def write_synthetic_scene(out_dir: str, seed: int = 0) -> str:
    """Write the fixture scene under out_dir and return its manifest path"""
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    write_point_cloud(os.path.join(out_dir, "scene.ply"), build_cloud(seed), binary=True)

    frames = []
    for index, extrinsic in enumerate(camera_path()):
        rgb, depth = render_frame(extrinsic)
        raw = np.clip(np.round(depth / DEPTH_SCALE), 0, 65535).astype(np.uint16)
        rgb_name = f"frames/rgb_{index:06d}.png"
        depth_name = f"frames/depth_{index:06d}.png"
        Image.fromarray(rgb).save(os.path.join(out_dir, rgb_name), format="PNG")
        cv2.imwrite(os.path.join(out_dir, depth_name), raw)
        frames.append({
            "frame_index": index,
            "rgb_path": rgb_name,
            "depth_path": depth_name,
            "intrinsics": [FOCAL, FOCAL, IMAGE_W / 2.0, IMAGE_H / 2.0],
            "extrinsic": [[float(x) for x in row] for row in extrinsic],
            "width": IMAGE_W,
            "height": IMAGE_H,
        })

    document = {
        "scene_id": f"synthetic_{seed:03d}",
        "cloud_path": "scene.ply",
        "depth_scale": DEPTH_SCALE,
        "up_axis": "Z_UP",
        "objects": [
            {
                "mark_id": spec.mark_id,
                "label": spec.label,
                "center": list(spec.center),
                "extents": list(spec.extents),
                "rotation": [[float(x) for x in row] for row in spec.rotation],
            }
            for spec in FURNITURE
        ],
        "frames": frames,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("Wrote synthetic scene {} with {} frames to {}", document["scene_id"], len(frames), out_dir)
    return manifest_path
