"""
Scene Manifest Parser
Parses scene manifests, PLY point clouds and posed RGB-D frames into validated scene records
"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import cv2
import numpy as np
from loguru import logger
from PIL import Image

from .errors import (
    DimensionMismatch,
    IoError,
    ParseError,
    UnsupportedFormat,
    ValidationError,
)

Vec3 = Tuple[float, float, float]
Mat3 = Tuple[Vec3, Vec3, Vec3]
DepthImage = np.ndarray  # (H, W) float64 meters; <= 0 means invalid

ORTHONORMAL_TOL = 1e-6
SUPPORTED_UP_AXES = ("Z_UP", "Y_UP")

# Rotation that takes Y-up coordinates to Z-up coordinates: (x, y, z) -> (x, -z, y)
Y_UP_TO_Z_UP = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])

MANIFEST_KEYS = {"scene_id", "cloud_path", "objects", "frames", "depth_scale", "up_axis", "cloud_up_axis"}
OBJECT_KEYS = {"mark_id", "label", "center", "extents", "rotation"}
FRAME_KEYS = {"frame_index", "rgb_path", "depth_path", "intrinsics", "extrinsic", "width", "height"}


@dataclass(frozen=True)
class OrientedBox:
    """Oriented 3D box; rotation maps box axes to world axes"""
    center: Vec3
    extents: Vec3  # full side lengths
    rotation: Mat3

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    @property
    def extents_array(self) -> np.ndarray:
        return np.asarray(self.extents, dtype=np.float64)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64)


@dataclass(frozen=True)
class ObjectInstance:
    """Labeled box with a stable mark id"""
    mark_id: int
    label: str
    obb: OrientedBox


@dataclass(frozen=True)
class FrameRecord:
    """One posed RGB-D frame; extrinsic is camera-to-world"""
    frame_index: int
    rgb_path: str
    depth_path: str
    intrinsics: Tuple[float, float, float, float]  # fx, fy, cx, cy
    extrinsic: Tuple[Tuple[float, float, float, float], ...]
    width: int
    height: int

    @property
    def extrinsic_matrix(self) -> np.ndarray:
        return np.asarray(self.extrinsic, dtype=np.float64)


@dataclass(frozen=True)
class SceneManifest:
    """One scene: cloud reference, objects and frames (always Z-up after ingest)"""
    scene_id: str
    cloud_path: str
    objects: Tuple[ObjectInstance, ...]
    frames: Tuple[FrameRecord, ...]
    depth_scale: float
    up_axis: str = "Z_UP"
    cloud_up_axis: str = "Z_UP"

    def object_by_id(self, mark_id: int) -> Optional[ObjectInstance]:
        for obj in self.objects:
            if obj.mark_id == mark_id:
                return obj
        return None

    def labels(self) -> List[str]:
        return [obj.label for obj in self.objects]


@dataclass
class PointCloud:
    """Point cloud in meters with optional uint8 colors"""
    points: np.ndarray  # (N, 3) float64
    colors: Optional[np.ndarray] = None  # (N, 3) uint8

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def subset(self, mask: np.ndarray) -> "PointCloud":
        colors = self.colors[mask] if self.colors is not None else None
        return PointCloud(points=self.points[mask], colors=colors)


# ---------------------------------------------------------------------------
# Manifest parsing
# ---------------------------------------------------------------------------

class SceneManifestParser:
    """Parser for scene manifest documents"""

    def __init__(self, strict: bool = False):
        self.strict = strict
        self.manifest: Optional[SceneManifest] = None

    def parse_file(self, file_path: str) -> SceneManifest:
        """Parse and validate a manifest file"""
        path = Path(file_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise IoError(f"cannot read manifest {file_path}: {e}") from e
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed manifest {file_path}: {e}") from e
        if not isinstance(document, dict):
            raise ParseError(f"malformed manifest {file_path}: top level must be an object")
        self.manifest = self.parse_document(document, base_dir=path.parent)
        return self.manifest

    def parse_document(self, document: Dict[str, Any], base_dir: Path) -> SceneManifest:
        """Build a manifest from an already-decoded document"""
        self._check_keys(document, MANIFEST_KEYS, "manifest")

        scene_id = document.get("scene_id")
        if not isinstance(scene_id, str) or not scene_id.strip():
            raise ValidationError("scene_id", "must be a non-empty string")

        up_axis = document.get("up_axis", "Z_UP")
        if up_axis not in SUPPORTED_UP_AXES:
            raise ValidationError("up_axis", f"must be one of {SUPPORTED_UP_AXES}, got {up_axis!r}")
        cloud_up_axis = document.get("cloud_up_axis", up_axis)
        if cloud_up_axis not in SUPPORTED_UP_AXES:
            raise ValidationError("cloud_up_axis", f"must be one of {SUPPORTED_UP_AXES}, got {cloud_up_axis!r}")

        depth_scale = self._real(document.get("depth_scale"), "depth_scale")
        if depth_scale <= 0:
            raise ValidationError("depth_scale", f"must be > 0, got {depth_scale}")

        cloud_path = self._resolve_path(document.get("cloud_path"), base_dir, "cloud_path")

        raw_objects = document.get("objects")
        if not isinstance(raw_objects, list) or not raw_objects:
            raise ValidationError("objects", "at least one object is required")
        raw_frames = document.get("frames")
        if not isinstance(raw_frames, list) or not raw_frames:
            raise ValidationError("frames", "at least one frame is required")

        to_z_up = Y_UP_TO_Z_UP if up_axis == "Y_UP" else None
        objects = tuple(self._parse_object(raw, i, to_z_up) for i, raw in enumerate(raw_objects))
        frames = tuple(self._parse_frame(raw, i, base_dir, to_z_up) for i, raw in enumerate(raw_frames))

        seen = set()
        for obj in objects:
            if obj.mark_id in seen:
                raise ValidationError("mark_id", f"duplicate mark_id {obj.mark_id}")
            seen.add(obj.mark_id)

        return SceneManifest(
            scene_id=scene_id,
            cloud_path=cloud_path,
            objects=objects,
            frames=frames,
            depth_scale=depth_scale,
            up_axis="Z_UP",
            cloud_up_axis=cloud_up_axis,
        )

    def _check_keys(self, document: Dict[str, Any], allowed: set, where: str):
        unknown = sorted(set(document) - allowed)
        if not unknown:
            return
        if self.strict:
            raise ValidationError(where, f"unknown keys {unknown}")
        logger.warning("Ignoring unknown {} keys: {}", where, unknown)

    def _parse_object(self, raw: Any, index: int, to_z_up: Optional[np.ndarray]) -> ObjectInstance:
        where = f"objects[{index}]"
        if not isinstance(raw, dict):
            raise ParseError(f"{where} must be an object")
        self._check_keys(raw, OBJECT_KEYS, where)

        mark_id = raw.get("mark_id")
        if isinstance(mark_id, bool) or not isinstance(mark_id, int) or mark_id < 1:
            raise ValidationError(f"{where}.mark_id", f"must be an integer >= 1, got {mark_id!r}")
        label = raw.get("label")
        if not isinstance(label, str) or not label.strip():
            raise ValidationError(f"{where}.label", "must be a non-empty string")

        center = self._vector(raw.get("center"), 3, f"{where}.center")
        extents = self._vector(raw.get("extents"), 3, f"{where}.extents")
        if np.any(extents <= 0):
            raise ValidationError(f"{where}.extents", f"all extents must be > 0, got {extents.tolist()}")
        rotation = self._matrix(raw.get("rotation", np.eye(3).tolist()), 3, f"{where}.rotation")
        check_rotation(rotation, f"{where}.rotation", require_proper=True)

        if to_z_up is not None:
            center = to_z_up @ center
            rotation = to_z_up @ rotation

        box = OrientedBox(center=_as_vec3(center), extents=_as_vec3(extents), rotation=_as_mat3(rotation))
        return ObjectInstance(mark_id=mark_id, label=label.strip(), obb=box)

    def _parse_frame(self, raw: Any, index: int, base_dir: Path, to_z_up: Optional[np.ndarray]) -> FrameRecord:
        where = f"frames[{index}]"
        if not isinstance(raw, dict):
            raise ParseError(f"{where} must be an object")
        self._check_keys(raw, FRAME_KEYS, where)

        frame_index = raw.get("frame_index")
        if isinstance(frame_index, bool) or not isinstance(frame_index, int) or frame_index < 0:
            raise ValidationError(f"{where}.frame_index", f"must be an unsigned integer, got {frame_index!r}")

        intrinsics = self._vector(raw.get("intrinsics"), 4, f"{where}.intrinsics")
        if intrinsics[0] <= 0 or intrinsics[1] <= 0:
            raise ValidationError(f"{where}.intrinsics", "fx and fy must be > 0")

        extrinsic = self._matrix(raw.get("extrinsic"), 4, f"{where}.extrinsic")
        check_rotation(extrinsic[:3, :3], f"{where}.extrinsic", require_proper=False)
        if to_z_up is not None:
            lift = np.eye(4)
            lift[:3, :3] = to_z_up
            extrinsic = lift @ extrinsic

        width, height = raw.get("width"), raw.get("height")
        for name, value in (("width", width), ("height", height)):
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise ValidationError(f"{where}.{name}", f"must be a positive integer, got {value!r}")

        return FrameRecord(
            frame_index=frame_index,
            rgb_path=self._resolve_path(raw.get("rgb_path"), base_dir, f"{where}.rgb_path"),
            depth_path=self._resolve_path(raw.get("depth_path"), base_dir, f"{where}.depth_path"),
            intrinsics=tuple(float(v) for v in intrinsics),
            extrinsic=tuple(tuple(float(v) for v in row) for row in extrinsic),
            width=width,
            height=height,
        )

    def _resolve_path(self, value: Any, base_dir: Path, field_name: str) -> str:
        if not isinstance(value, str) or not value:
            raise ValidationError(field_name, "must be a non-empty path")
        path = Path(value)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ValidationError(field_name, f"path does not exist: {path}")
        return str(path.resolve())

    @staticmethod
    def _real(value: Any, field_name: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ValidationError(field_name, f"must be a finite number, got {value!r}")
        return float(value)

    @staticmethod
    def _vector(value: Any, size: int, field_name: str) -> np.ndarray:
        try:
            array = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise ValidationError(field_name, f"must be {size} numbers") from e
        if array.shape != (size,) or not np.all(np.isfinite(array)):
            raise ValidationError(field_name, f"must be {size} finite numbers")
        return array

    @staticmethod
    def _matrix(value: Any, size: int, field_name: str) -> np.ndarray:
        try:
            array = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise ValidationError(field_name, f"must be a {size}x{size} matrix") from e
        if array.shape != (size, size) or not np.all(np.isfinite(array)):
            raise ValidationError(field_name, f"must be a {size}x{size} matrix of finite numbers")
        return array

    def export_to_json(self, output_path: str):
        """Export the parsed manifest to JSON"""
        if not self.manifest:
            raise ValueError("No manifest to export. Run parse_file() first.")
        write_manifest(self.manifest, output_path)

    def summary(self) -> Dict[str, Any]:
        """Counts describing the parsed manifest"""
        if not self.manifest:
            return {}
        labels: Dict[str, int] = {}
        for label in self.manifest.labels():
            labels[label] = labels.get(label, 0) + 1
        return {
            "scene_id": self.manifest.scene_id,
            "objects": len(self.manifest.objects),
            "frames": len(self.manifest.frames),
            "labels": dict(sorted(labels.items())),
        }


def check_rotation(matrix: np.ndarray, field_name: str, require_proper: bool):
    """R·Rᵀ = I (and det = +1 when require_proper) within the orthonormal tolerance"""
    if not np.allclose(matrix @ matrix.T, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOL):
        raise ValidationError(field_name, "rotation is not orthonormal")
    if require_proper and abs(np.linalg.det(matrix) - 1.0) > ORTHONORMAL_TOL:
        raise ValidationError(field_name, "rotation determinant must be +1")


def _as_vec3(array: np.ndarray) -> Vec3:
    return (float(array[0]), float(array[1]), float(array[2]))


def _as_mat3(array: np.ndarray) -> Mat3:
    return tuple(_as_vec3(row) for row in array)  # type: ignore[return-value]


def load_manifest(path: str, strict: bool = False) -> SceneManifest:
    """Load and validate one scene manifest"""
    return SceneManifestParser(strict=strict).parse_file(path)


def manifest_to_dict(manifest: SceneManifest) -> Dict[str, Any]:
    return {
        "scene_id": manifest.scene_id,
        "cloud_path": manifest.cloud_path,
        "depth_scale": manifest.depth_scale,
        "up_axis": manifest.up_axis,
        "cloud_up_axis": manifest.cloud_up_axis,
        "objects": [
            {
                "mark_id": obj.mark_id,
                "label": obj.label,
                "center": list(obj.obb.center),
                "extents": list(obj.obb.extents),
                "rotation": [list(row) for row in obj.obb.rotation],
            }
            for obj in manifest.objects
        ],
        "frames": [
            {
                "frame_index": frame.frame_index,
                "rgb_path": frame.rgb_path,
                "depth_path": frame.depth_path,
                "intrinsics": list(frame.intrinsics),
                "extrinsic": [list(row) for row in frame.extrinsic],
                "width": frame.width,
                "height": frame.height,
            }
            for frame in manifest.frames
        ],
    }


def write_manifest(manifest: SceneManifest, output_path: str):
    """Write a manifest document; paths are stored absolute"""
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(manifest_to_dict(manifest), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
COORD_TYPES = {"f4", "f8"}


@dataclass
class PlyHeader:
    """Vertex layout read from a PLY header"""
    fmt: str
    vertex_count: int
    properties: List[Tuple[str, str]] = field(default_factory=list)  # (name, numpy code)
    header_size: int = 0


def read_ply_header(data: bytes) -> PlyHeader:
    """Parse the header of a PLY file"""
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing magic or end_header)")
    newline = data.find(b"\n", end)
    header_size = len(data) if newline < 0 else newline + 1
    try:
        lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise ParseError("PLY file has invalid header") from e

    fmt = None
    header: Optional[PlyHeader] = None
    current_element = None
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2:
                raise ParseError("PLY format line is incomplete")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError(f"bad PLY element line: {line!r}")
            current_element = parts[1]
            if current_element == "vertex":
                if header is not None:
                    raise ParseError("PLY file declares two vertex elements")
                try:
                    count = int(parts[2])
                except ValueError as e:
                    raise ParseError(f"bad vertex count: {parts[2]!r}") from e
                header = PlyHeader(fmt=fmt or "", vertex_count=count)
            elif header is None:
                raise UnsupportedFormat("vertex element must come first")
        elif parts[0] == "property":
            if current_element != "vertex":
                continue
            if len(parts) >= 2 and parts[1] == "list":
                raise UnsupportedFormat("list properties on vertices are not supported")
            if len(parts) != 3 or parts[1] not in PLY_TYPES:
                raise ParseError(f"bad PLY property line: {line!r}")
            header.properties.append((parts[2], PLY_TYPES[parts[1]]))

    if header is None:
        raise ParseError("PLY file has no vertex element")
    header.fmt = fmt or ""
    header.header_size = header_size
    if header.fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"PLY format {header.fmt!r} is not supported")
    names = [name for name, _ in header.properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"PLY vertex has no {axis!r} property")
        if dict(header.properties)[axis] not in COORD_TYPES:
            raise UnsupportedFormat(f"PLY coordinate {axis!r} must be float32 or float64")
    return header


def load_point_cloud(path: str) -> PointCloud:
    """Load an ascii or binary little-endian PLY cloud"""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read point cloud {path}: {e}") from e

    header = read_ply_header(data)
    body = data[header.header_size:]
    if header.fmt == "ascii":
        columns = _read_ascii_vertices(body, header)
    else:
        dtype = np.dtype([(name, "<" + code) for name, code in header.properties])
        if len(body) < dtype.itemsize * header.vertex_count:
            raise ParseError(f"PLY body too short for {header.vertex_count} vertices")
        table = np.frombuffer(body, dtype=dtype, count=header.vertex_count)
        columns = {name: table[name] for name, _ in header.properties}

    points = np.stack([columns["x"], columns["y"], columns["z"]], axis=1).astype(np.float64)
    if not np.all(np.isfinite(points)):
        raise ParseError(f"point cloud {path} contains non-finite coordinates")

    colors = None
    if all(c in columns for c in ("red", "green", "blue")):
        kinds = dict(header.properties)
        raw = np.stack([columns["red"], columns["green"], columns["blue"]], axis=1)
        colors = _normalize_colors(raw, kinds["red"])
    logger.debug("Loaded {} points from {}", len(points), path)
    return PointCloud(points=points, colors=colors)


def _read_ascii_vertices(body: bytes, header: PlyHeader) -> Dict[str, np.ndarray]:
    lines = body.decode("ascii", errors="replace").splitlines()
    rows = [line.split() for line in lines if line.strip()][:header.vertex_count]
    if len(rows) < header.vertex_count:
        raise ParseError(f"PLY body has {len(rows)} rows, expected {header.vertex_count}")
    width = len(header.properties)
    try:
        table = np.array(rows, dtype=np.float64).reshape(header.vertex_count, width)
    except ValueError as e:
        raise ParseError(f"malformed ascii PLY vertex rows: {e}") from e
    return {name: table[:, i] for i, (name, _) in enumerate(header.properties)}


def _normalize_colors(raw: np.ndarray, code: str) -> np.ndarray:
    """Map PLY color channels to uint8 [0, 255]"""
    if code == "u1":
        return raw.astype(np.uint8)
    values = raw.astype(np.float64)
    if code in COORD_TYPES:
        if values.size and values.max() <= 1.0:
            values = values * 255.0
        return np.clip(np.round(values), 0, 255).astype(np.uint8)
    if code == "u2":
        return (raw.astype(np.uint32) >> 8).astype(np.uint8)
    return np.clip(values, 0, 255).astype(np.uint8)


def write_point_cloud(path: str, cloud: PointCloud, binary: bool = True):
    """Write a PLY cloud with float64 coordinates and optional uint8 colors"""
    n = len(cloud)
    props = [("x", "f8", "double"), ("y", "f8", "double"), ("z", "f8", "double")]
    if cloud.colors is not None:
        props += [("red", "u1", "uchar"), ("green", "u1", "uchar"), ("blue", "u1", "uchar")]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {ply_name} {name}" for name, _, ply_name in props]
    header.append("end_header")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            table = np.empty(n, dtype=np.dtype([(name, "<" + code) for name, code, _ in props]))
            table["x"], table["y"], table["z"] = cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]
            if cloud.colors is not None:
                table["red"], table["green"], table["blue"] = cloud.colors.T
            f.write(table.tobytes())
        else:
            for i in range(n):
                row = [repr(float(v)) for v in cloud.points[i]]
                if cloud.colors is not None:
                    row += [str(int(c)) for c in cloud.colors[i]]
                f.write((" ".join(row) + "\n").encode("ascii"))


def load_scene_cloud(manifest: SceneManifest) -> PointCloud:
    """Load the manifest's cloud in the canonical Z-up frame"""
    cloud = load_point_cloud(manifest.cloud_path)
    if manifest.cloud_up_axis == "Y_UP":
        cloud = PointCloud(points=cloud.points @ Y_UP_TO_Z_UP.T, colors=cloud.colors)
    return cloud


# ---------------------------------------------------------------------------
# RGB-D frames
# ---------------------------------------------------------------------------

def load_depth(frame: FrameRecord, depth_scale: float) -> DepthImage:
    """Read a 16-bit depth PNG and convert it to meters (0 = invalid)"""
    if not os.path.exists(frame.depth_path):
        raise IoError(f"depth image not found: {frame.depth_path}")
    raw = cv2.imread(frame.depth_path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ParseError(f"cannot decode depth image {frame.depth_path}")
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise ParseError(f"depth image {frame.depth_path} must be 16-bit single channel")
    if raw.shape != (frame.height, frame.width):
        raise DimensionMismatch(
            f"depth image {frame.depth_path} is {raw.shape[1]}x{raw.shape[0]}, "
            f"frame declares {frame.width}x{frame.height}"
        )
    depth = raw.astype(np.float64) * depth_scale
    depth[raw == 0] = 0.0
    return depth


def load_rgb(frame: FrameRecord) -> np.ndarray:
    """Read an 8-bit RGB frame as an (H, W, 3) uint8 array"""
    try:
        with Image.open(frame.rgb_path) as image:
            rgb = np.asarray(image.convert("RGB"))
    except OSError as e:
        raise ParseError(f"cannot decode rgb image {frame.rgb_path}: {e}") from e
    if rgb.shape[:2] != (frame.height, frame.width):
        raise DimensionMismatch(
            f"rgb image {frame.rgb_path} is {rgb.shape[1]}x{rgb.shape[0]}, "
            f"frame declares {frame.width}x{frame.height}"
        )
    return rgb.copy()
