"""
Point cloud containers and the geometric transforms applied before projection.

Clouds are stored as an ``(N, 4)`` float32 array of ``(x, y, z, intensity)``
in the LiDAR frame (x forward, y left, z up), optionally paired with one
class id per point.  Every operation returns a new cloud; arrays inside a
cloud are marked read-only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

log = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16


class MalformedScanError(ValueError):
    pass


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True)
class RoiSpec:
    x_min: float = 0.0
    x_max: float = 50.0
    y_min: float = -6.0
    y_max: float = 12.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate ROI: {self}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered LiDAR returns, ``points[i] = (x, y, z, intensity)``.

    ``labels`` is either None or a uint8 array of class ids with one entry per
    point.  ``n_invalid`` counts records rejected at ingestion.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    n_invalid: int = field(default=0, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"labels length {lab.shape[0]} != point count {pts.shape[0]}")
            object.__setattr__(self, "labels", _frozen(lab))

    @classmethod
    def from_points(cls, pts, labels=None) -> "PointCloud":
        return cls(np.asarray(pts, dtype=np.float32).reshape(-1, 4), labels)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> Point:
        return Point(*(float(v) for v in self.points[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        same_labels = self.labels is None or np.array_equal(self.labels, other.labels)
        return same_labels and np.array_equal(self.points, other.points)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.points, labels)

    def select(self, mask: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[mask]
        return PointCloud(self.points[mask], labels)


def read_kitti_scan(data: bytes) -> PointCloud:
    """Decode a KITTI Velodyne ``.bin`` payload.

    Records with a non-finite field are dropped and counted in
    ``PointCloud.n_invalid``; intensity is clamped to [0, 1].
    """
    if len(data) % RECORD_BYTES:
        raise MalformedScanError(
            f"scan length {len(data)} is not a multiple of {RECORD_BYTES} bytes")
    pts = np.frombuffer(data, dtype=RECORD_DTYPE).reshape(-1, 4).astype(np.float32)
    finite = np.isfinite(pts).all(axis=1)
    n_invalid = int((~finite).sum())
    if n_invalid:
        log.warning("dropped %d non-finite points", n_invalid)
        pts = pts[finite]
    i = pts[:, 3]
    # comparisons instead of np.clip so in-range values (including -0.0) keep their bits
    pts[:, 3] = np.where(i < 0, np.float32(0), np.where(i > 1, np.float32(1), i))
    return PointCloud(pts, n_invalid=n_invalid)


def write_kitti_scan(cloud: PointCloud) -> bytes:
    return cloud.points.astype(RECORD_DTYPE).tobytes()


def load_kitti_scan(path) -> PointCloud:
    with open(path, "rb") as f:
        return read_kitti_scan(f.read())


def crop_roi(cloud: PointCloud, roi: RoiSpec) -> PointCloud:
    """Keep points with ``x_min <= x < x_max`` and ``y_min <= y < y_max``."""
    x = cloud.x.astype(np.float64)
    y = cloud.y.astype(np.float64)
    keep = (x >= roi.x_min) & (x < roi.x_max) & (y >= roi.y_min) & (y < roi.y_max)
    return cloud.select(keep)


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    if angle == 0:
        return cloud
    c, s = np.cos(angle), np.sin(angle)
    x = cloud.x.astype(np.float64)
    y = cloud.y.astype(np.float64)
    pts = cloud.points.copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    return PointCloud(pts, cloud.labels)


def flip_y(cloud: PointCloud) -> PointCloud:
    pts = cloud.points.copy()
    pts[:, 1] = -pts[:, 1]
    return PointCloud(pts, cloud.labels)


def jitter(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    """Add zero-mean Gaussian noise of std ``sigma`` metres to x, y, z."""
    pts = cloud.points.copy()
    pts[:, :3] += rng.normal(0.0, sigma, size=(len(cloud), 3)).astype(np.float32)
    return PointCloud(pts, cloud.labels)


def read_label_file(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).copy()


def write_label_file(labels: np.ndarray) -> bytes:
    return np.asarray(labels, dtype=np.uint8).tobytes()


def load_labeled_cloud(bin_path, label_path) -> PointCloud:
    cloud = load_kitti_scan(bin_path)
    with open(label_path, "rb") as f:
        labels = read_label_file(f.read())
    return cloud.with_labels(labels)
