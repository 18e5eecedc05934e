"""
Camera-to-LiDAR label transfer.

Road labels come from image-space segmentation masks projected onto the
points; vehicle labels come either from masks or directly from 3D boxes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3D, CalibrationSet, points_in_box, project_to_image
from .pnm import read_pgm
from .pointcloud import PointCloud
from .projection import BACKGROUND, ROAD, VEHICLE


@dataclass(frozen=True, eq=False)
class SegMask:
    data: np.ndarray  # (H, W) class ids

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.uint8)
        if d.ndim != 2 or min(d.shape) == 0:
            raise ValueError(f"mask must be a non-empty 2D array, got shape {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def mask_from_pgm(data: bytes, class_id: int = ROAD, threshold: int = 128) -> SegMask:
    """Pixels ``>= threshold`` become ``class_id``, everything else background."""
    gray = read_pgm(data)
    return SegMask(np.where(gray >= threshold, class_id, BACKGROUND).astype(np.uint8))


def label_from_mask(cloud: PointCloud, calib: CalibrationSet, mask: SegMask) -> np.ndarray:
    u, v, depth = project_to_image(calib, cloud.points[:, :3])
    out = np.full(len(cloud), BACKGROUND, dtype=np.uint8)
    front = depth > 0
    # nearest pixel, halves rounded up
    col = np.floor(u[front] + 0.5)
    row = np.floor(v[front] + 0.5)
    inside = (row >= 0) & (row < mask.height) & (col >= 0) & (col < mask.width)
    hit = np.flatnonzero(front)[inside]
    out[hit] = mask.data[row[inside].astype(np.intp), col[inside].astype(np.intp)]
    return out


def label_from_boxes(cloud: PointCloud, boxes: Sequence[Box3D]) -> np.ndarray:
    inside = np.zeros(len(cloud), dtype=bool)
    for box in boxes:
        inside |= points_in_box(cloud.points[:, :3], box)
    return np.where(inside, VEHICLE, BACKGROUND).astype(np.uint8)


def merge_labels(road, vehicle) -> np.ndarray:
    road = np.asarray(road, dtype=np.uint8)
    vehicle = np.asarray(vehicle, dtype=np.uint8)
    if road.shape != vehicle.shape:
        raise ValueError(f"label length mismatch: {road.shape} vs {vehicle.shape}")
    return np.where(vehicle == VEHICLE, VEHICLE,
                    np.where(road == ROAD, ROAD, BACKGROUND)).astype(np.uint8)
