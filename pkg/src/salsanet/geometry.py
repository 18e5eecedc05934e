"""
Camera/LiDAR geometry for label transfer.

Only the KITTI left colour camera (P2) is supported.  Calibration matrices are
kept in float64; LiDAR points are projected with the homogeneous chain

    pixel ~ P2 @ R0_rect(4x4) @ Tr_velo_to_cam(4x4) @ [x, y, z, 1]^T
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .pointcloud import Point

CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}
DEFAULT_VEHICLE_TYPES = ("Car", "Van", "Truck")


class CalibParseError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _orthonormal(m: np.ndarray, tol: float = 1e-3) -> bool:
    return bool(np.allclose(m @ m.T, np.eye(3), atol=tol))


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    cam_projection: np.ndarray   # P2, 3x4
    rectification: np.ndarray    # R0_rect, 3x3
    lidar_to_cam: np.ndarray     # Tr_velo_to_cam, 3x4

    def __post_init__(self):
        for name, key in (("cam_projection", "P2"), ("rectification", "R0_rect"),
                          ("lidar_to_cam", "Tr_velo_to_cam")):
            m = np.array(getattr(self, name), dtype=np.float64)
            if m.shape != CALIB_KEYS[key]:
                raise CalibParseError(key, f"expected shape {CALIB_KEYS[key]}, got {m.shape}")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        if not _orthonormal(self.rectification):
            raise CalibParseError("R0_rect", "rectification is not orthonormal")
        if not _orthonormal(self.lidar_to_cam[:, :3]):
            raise CalibParseError("Tr_velo_to_cam", "rotation part is not orthonormal")

    def __eq__(self, other):
        if not isinstance(other, CalibrationSet):
            return NotImplemented
        return (np.array_equal(self.cam_projection, other.cam_projection)
                and np.array_equal(self.rectification, other.rectification)
                and np.array_equal(self.lidar_to_cam, other.lidar_to_cam))

    @property
    def rect_4x4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rectification
        return m

    @property
    def velo_to_cam_4x4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :] = self.lidar_to_cam
        return m

    @property
    def velo_to_rect(self) -> np.ndarray:
        """4x4 map from LiDAR coordinates to rectified camera coordinates."""
        return self.rect_4x4 @ self.velo_to_cam_4x4

    @property
    def rect_to_velo(self) -> np.ndarray:
        return np.linalg.inv(self.velo_to_rect)


def parse_kitti_calib(text: str) -> CalibrationSet:
    values = {}
    for line in text.splitlines():
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep or key not in CALIB_KEYS:
            continue
        try:
            nums = [float(t) for t in rest.split()]
        except ValueError as e:
            raise CalibParseError(key, f"non-numeric value ({e})") from None
        shape = CALIB_KEYS[key]
        if len(nums) != shape[0] * shape[1]:
            raise CalibParseError(
                key, f"expected {shape[0] * shape[1]} values, got {len(nums)}")
        values[key] = np.array(nums).reshape(shape)
    for key in CALIB_KEYS:
        if key not in values:
            raise CalibParseError(key, "missing from calibration text")
    return CalibrationSet(values["P2"], values["R0_rect"], values["Tr_velo_to_cam"])


def format_kitti_calib(calib: CalibrationSet) -> str:
    """Serialise with 17 significant digits so parsing round-trips exactly."""
    rows = []
    for key, m in (("P2", calib.cam_projection), ("R0_rect", calib.rectification),
                   ("Tr_velo_to_cam", calib.lidar_to_cam)):
        rows.append(key + ": " + " ".join(f"{v:.17g}" for v in m.ravel()))
    return "\n".join(rows) + "\n"


def load_kitti_calib(path) -> CalibrationSet:
    with open(path, encoding="utf-8") as f:
        return parse_kitti_calib(f.read())


def project_to_image(calib: CalibrationSet, xyz: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised LiDAR -> pixel projection.

    Returns ``(u, v, depth)``; ``depth`` is the rectified-camera z.  Entries
    with ``depth <= 0`` are behind the camera and their ``u, v`` are NaN.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rect = xyz @ calib.velo_to_rect[:3, :3].T + calib.velo_to_rect[:3, 3]
    depth = rect[:, 2]
    img = rect @ calib.cam_projection[:, :3].T + calib.cam_projection[:, 3]
    front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, img[:, 0] / img[:, 2], np.nan)
        v = np.where(front, img[:, 1] / img[:, 2], np.nan)
    return u, v, depth


def lidar_to_pixel(calib: CalibrationSet, p: Point) -> Optional[Tuple[float, float, float]]:
    """Pixel ``(u, v, depth)`` of a LiDAR point, or None when it is behind the camera."""
    u, v, d = project_to_image(calib, np.array([[p[0], p[1], p[2]]]))
    if not d[0] > 0:
        return None
    return float(u[0]), float(v[0]), float(d[0])


@dataclass(frozen=True)
class Box3D:
    """Oriented box in the LiDAR frame; ``center`` is the geometric centre."""

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]  # length (along heading), width, height
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")


def points_in_box(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean membership mask, boundary inclusive."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    d = xyz - np.asarray(box.center, dtype=np.float64)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # rotate by -yaw into the box frame
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    length, width, height = box.size
    return ((np.abs(lx) <= length / 2) & (np.abs(ly) <= width / 2)
            & (np.abs(d[:, 2]) <= height / 2))


def point_in_box(p: Point, box: Box3D) -> bool:
    return bool(points_in_box(np.array([p[0], p[1], p[2]]), box)[0])


@dataclass(frozen=True)
class KittiObject:
    type: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: Tuple[float, float, float, float]
    dimensions: Tuple[float, float, float]  # h, w, l
    location: Tuple[float, float, float]    # bottom centre, rectified camera frame
    rotation_y: float


def parse_kitti_objects(text: str) -> List[KittiObject]:
    objs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        f = line.split()
        if not f:
            continue
        if len(f) < 15:
            raise ValueError(f"object label line {lineno}: expected 15 fields, got {len(f)}")
        v = [float(t) for t in f[1:15]]
        objs.append(KittiObject(f[0], v[0], int(v[1]), v[2], tuple(v[3:7]),
                                tuple(v[7:10]), tuple(v[10:13]), v[13]))
    return objs


def kitti_object_to_box(obj: KittiObject, calib: CalibrationSet) -> Box3D:
    """Convert a camera-frame KITTI object to a LiDAR-frame Box3D.

    KITTI locations are the bottom centre of the box; camera y points down,
    so the geometric centre sits ``h/2`` above (smaller y).
    """
    h, w, l = obj.dimensions
    x, y, z = obj.location
    to_velo = calib.rect_to_velo
    center = to_velo @ np.array([x, y - h / 2, z, 1.0])
    # object heading is its local x axis rotated by rotation_y about camera y
    heading = to_velo[:3, :3] @ np.array([math.cos(obj.rotation_y), 0.0, -math.sin(obj.rotation_y)])
    yaw = math.atan2(heading[1], heading[0])
    return Box3D(tuple(float(c) for c in center[:3]), (l, w, h), yaw)


def boxes_from_kitti_labels(text: str, calib: CalibrationSet,
                            types: Iterable[str] = DEFAULT_VEHICLE_TYPES) -> List[Box3D]:
    types = set(types)
    return [kitti_object_to_box(o, calib) for o in parse_kitti_objects(text) if o.type in types]


def box_to_kitti_object(box: Box3D, calib: CalibrationSet, type_: str = "Car") -> KittiObject:
    """Inverse of :func:`kitti_object_to_box`, used to synthesise label files."""
    l, w, h = box.size
    to_rect = calib.velo_to_rect
    c = to_rect @ np.array([*box.center, 1.0])
    heading = to_rect[:3, :3] @ np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    ry = math.atan2(-heading[2], heading[0])
    return KittiObject(type_, 0.0, 0, 0.0, (0.0, 0.0, 0.0, 0.0), (h, w, l),
                       (float(c[0]), float(c[1] + h / 2), float(c[2])), ry)


def format_kitti_objects(objs: Sequence[KittiObject]) -> str:
    lines = []
    for o in objs:
        nums = [o.truncation, o.occlusion, o.alpha, *o.bbox, *o.dimensions, *o.location, o.rotation_y]
        lines.append(o.type + " " + " ".join(f"{v:.17g}" for v in nums))
    return "\n".join(lines) + ("\n" if lines else "")
