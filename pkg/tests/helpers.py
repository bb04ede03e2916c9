import math
from typing import Iterable, Sequence, Tuple

import numpy as np

from src.scene_ingest import FrameRecord, ObjectInstance, OrientedBox, PointCloud, SceneManifest

IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def yaw_matrix(degrees: float):
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return ((c, -s, 0.0), (s, c, 0.0), (0.0, 0.0, 1.0))


def make_box(center, extents=(0.5, 0.5, 0.5), yaw_deg: float = 0.0) -> OrientedBox:
    rotation = IDENTITY if yaw_deg == 0.0 else yaw_matrix(yaw_deg)
    return OrientedBox(
        center=tuple(float(v) for v in center),
        extents=tuple(float(v) for v in extents),
        rotation=rotation,
    )


def make_object(mark_id: int, label: str, center, extents=(0.5, 0.5, 0.5), yaw_deg: float = 0.0) -> ObjectInstance:
    return ObjectInstance(mark_id=mark_id, label=label, obb=make_box(center, extents, yaw_deg))


def make_frame(index: int, extrinsic=None, width: int = 64, height: int = 48, focal: float = 50.0) -> FrameRecord:
    extrinsic = np.eye(4) if extrinsic is None else np.asarray(extrinsic, dtype=np.float64)
    return FrameRecord(
        frame_index=index,
        rgb_path=f"rgb_{index}.png",
        depth_path=f"depth_{index}.png",
        intrinsics=(focal, focal, width / 2.0, height / 2.0),
        extrinsic=tuple(tuple(float(v) for v in row) for row in extrinsic),
        width=width,
        height=height,
    )


def make_scene(objects: Sequence[ObjectInstance], frames: Iterable[FrameRecord] = (), scene_id: str = "scene0000") -> SceneManifest:
    frames = tuple(frames) or (make_frame(0),)
    return SceneManifest(
        scene_id=scene_id,
        cloud_path="cloud.ply",
        objects=tuple(objects),
        frames=frames,
        depth_scale=0.001,
    )


def room_cloud(size: Tuple[float, float] = (6.0, 5.0), height: float = 2.7, spacing: float = 0.1) -> PointCloud:
    """Floor, ceiling and four walls sampled on a grid"""
    lx, ly = size
    xs = np.arange(0.0, lx + 1e-9, spacing)
    ys = np.arange(0.0, ly + 1e-9, spacing)
    zs = np.arange(0.0, height + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    floor = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    ceiling = floor.copy()
    ceiling[:, 2] = height
    walls = []
    for x in (0.0, lx):
        wy, wz = np.meshgrid(ys, zs, indexing="ij")
        walls.append(np.column_stack([np.full(wy.size, x), wy.ravel(), wz.ravel()]))
    for y in (0.0, ly):
        wx, wz = np.meshgrid(xs, zs, indexing="ij")
        walls.append(np.column_stack([wx.ravel(), np.full(wx.size, y), wz.ravel()]))
    points = np.vstack([floor, ceiling] + walls)
    colors = np.full((len(points), 3), 200, dtype=np.uint8)
    return PointCloud(points=points, colors=colors)


def furnished_scene(scene_id: str = "scene0000") -> SceneManifest:
    """Ten objects with unique labels except two chairs, spread over a 6 x 5 m room"""
    objects = [
        make_object(1, "sofa", (1.2, 4.2, 0.4), (2.0, 0.9, 0.8)),
        make_object(2, "table", (3.0, 2.5, 0.375), (1.2, 0.8, 0.75), 15.0),
        make_object(3, "chair", (3.0, 1.6, 0.45), (0.5, 0.5, 0.9)),
        make_object(4, "chair", (3.0, 3.4, 0.45), (0.5, 0.5, 0.9), 180.0),
        make_object(5, "tv", (0.15, 2.0, 1.2), (0.1, 1.2, 0.7)),
        make_object(6, "fridge", (5.6, 0.45, 0.9), (0.7, 0.7, 1.8)),
        make_object(7, "sink", (4.3, 0.3, 0.45), (0.8, 0.5, 0.9)),
        make_object(8, "lamp", (0.3, 3.3, 0.8), (0.35, 0.35, 1.6)),
        make_object(9, "cabinet", (5.7, 3.5, 0.5), (0.5, 1.2, 1.0)),
        make_object(10, "plant", (1.5, 0.5, 0.4), (0.4, 0.4, 0.8)),
    ]
    return make_scene(objects, scene_id=scene_id)
