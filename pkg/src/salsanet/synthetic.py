"""
Synthetic road scenes with exact per-point labels.

A scene is a sloped road strip on flat ground, a few oriented vehicle boxes
sitting on the road and some vertical clutter (poles) off the road.  Points
are sampled uniformly on surfaces; no ray casting.  Used for tests, the
overfit/imbalance experiments and the CLI demo dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .geometry import Box3D, CalibrationSet, points_in_box, project_to_image
from .pointcloud import PointCloud
from .projection import BACKGROUND, ROAD, VEHICLE

GROUND_Z = -1.73  # HDL-64E mounting height on the KITTI car

# Calibration in the layout of a KITTI object-benchmark calib file.
KITTI_LIKE_CALIB = CalibrationSet(
    np.array([[7.215377e+02, 0.0, 6.095593e+02, 4.485728e+01],
              [0.0, 7.215377e+02, 1.728540e+02, 2.163791e-01],
              [0.0, 0.0, 1.0, 2.745884e-03]]),
    np.array([[9.999239e-01, 9.837760e-03, -7.445048e-03],
              [-9.869795e-03, 9.999421e-01, -4.278459e-03],
              [7.402527e-03, 4.351614e-03, 9.999631e-01]]),
    np.array([[7.533745e-03, -9.999714e-01, -6.166020e-04, -4.069766e-03],
              [1.480249e-02, 7.280733e-04, -9.998902e-01, -7.631618e-02],
              [9.998621e-01, 7.523790e-03, 1.480755e-02, -2.717806e-01]]),
)
IMAGE_SIZE = (375, 1242)  # rows, cols


@dataclass(frozen=True)
class SceneConfig:
    x_range: Tuple[float, float] = (0.0, 52.0)
    y_range: Tuple[float, float] = (-7.0, 14.0)
    ground_density: float = 10.0        # points per square metre
    vehicles: Tuple[int, int] = (1, 3)  # inclusive range
    vehicle_density: float = 40.0       # points per square metre of box surface
    poles: Tuple[int, int] = (2, 6)


@dataclass
class Scene:
    cloud: PointCloud
    boxes: List[Box3D]
    road_center: Tuple[float, float]  # y = c0 + c1 * x
    road_half_width: float


def _road_y(x, center):
    return center[0] + center[1] * x


def _box_surface(rng, box: Box3D, density: float) -> np.ndarray:
    l, w, h = box.size
    faces = [  # (area, sampler in box-local coordinates)
        (l * w, lambda n: np.c_[rng.uniform(-l / 2, l / 2, n), rng.uniform(-w / 2, w / 2, n), np.full(n, h / 2)]),
        (l * h, lambda n: np.c_[rng.uniform(-l / 2, l / 2, n), np.full(n, w / 2), rng.uniform(-h / 2, h / 2, n)]),
        (l * h, lambda n: np.c_[rng.uniform(-l / 2, l / 2, n), np.full(n, -w / 2), rng.uniform(-h / 2, h / 2, n)]),
        (w * h, lambda n: np.c_[np.full(n, l / 2), rng.uniform(-w / 2, w / 2, n), rng.uniform(-h / 2, h / 2, n)]),
        (w * h, lambda n: np.c_[np.full(n, -l / 2), rng.uniform(-w / 2, w / 2, n), rng.uniform(-h / 2, h / 2, n)]),
    ]
    local = np.concatenate([f(max(1, int(a * density))) for a, f in faces])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xy = local[:, :2] @ np.array([[c, s], [-s, c]])
    # shrink by a hair so surface points stay inside the inclusive box test after float32 rounding
    return np.c_[xy * 0.999, local[:, 2] * 0.999] + np.asarray(box.center)


def make_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> Scene:
    (x0, x1), (y0, y1) = cfg.x_range, cfg.y_range
    center = (rng.uniform(-1.0, 3.0), rng.uniform(-0.05, 0.05))
    half_w = rng.uniform(3.0, 4.5)

    boxes: List[Box3D] = []
    for _ in range(rng.integers(cfg.vehicles[0], cfg.vehicles[1] + 1)):
        for _attempt in range(20):
            x = rng.uniform(x0 + 5, x1 - 4)
            y = _road_y(x, center) + rng.choice([-1.6, 1.6])
            if all(math.hypot(x - b.center[0], y - b.center[1]) > 6 for b in boxes):
                break
        size = (rng.uniform(3.8, 4.8), rng.uniform(1.6, 1.9), rng.uniform(1.4, 1.7))
        yaw = math.atan(center[1]) + rng.normal(0, 0.05)
        boxes.append(Box3D((x, y, GROUND_Z + size[2] / 2 + 0.02), size, yaw))

    n_ground = int((x1 - x0) * (y1 - y0) * cfg.ground_density)
    gx = rng.uniform(x0, x1, n_ground)
    gy = rng.uniform(y0, y1, n_ground)
    on_road = np.abs(gy - _road_y(gx, center)) <= half_w
    gz = np.where(on_road, GROUND_Z + rng.normal(0, 0.02, n_ground),
                  GROUND_Z + 0.15 + rng.normal(0, 0.05, n_ground))
    gi = np.where(on_road, rng.uniform(0.02, 0.2, n_ground), rng.uniform(0.35, 0.7, n_ground))
    ground = np.c_[gx, gy, gz, gi]
    glab = np.where(on_road, ROAD, BACKGROUND)
    # ground under a car is occluded
    occluded = np.zeros(n_ground, dtype=bool)
    for b in boxes:
        occluded |= points_in_box(np.c_[gx, gy, np.full(n_ground, b.center[2])], b)
    ground, glab = ground[~occluded], glab[~occluded]

    parts = [ground]
    labels = [glab]
    for b in boxes:
        pts = _box_surface(rng, b, cfg.vehicle_density)
        parts.append(np.c_[pts, rng.uniform(0.1, 0.9, len(pts))])
        labels.append(np.full(len(pts), VEHICLE))
    for _ in range(rng.integers(cfg.poles[0], cfg.poles[1] + 1)):
        px = rng.uniform(x0 + 2, x1)
        side = rng.choice([-1, 1])
        py = _road_y(px, center) + side * (half_w + rng.uniform(1.0, 3.0))
        n = 60
        height = rng.uniform(2.0, 6.0)
        ang = rng.uniform(0, 2 * math.pi, n)
        pole = np.c_[px + 0.15 * np.cos(ang), py + 0.15 * np.sin(ang),
                     rng.uniform(GROUND_Z, GROUND_Z + height, n), rng.uniform(0.3, 0.8, n)]
        parts.append(pole)
        labels.append(np.full(n, BACKGROUND))

    pts = np.concatenate(parts).astype(np.float32)
    lab = np.concatenate(labels).astype(np.uint8)
    order = rng.permutation(len(pts))
    return Scene(PointCloud(pts[order], lab[order]), boxes, center, half_w)


def road_mask(scene: Scene, calib: CalibrationSet = KITTI_LIKE_CALIB,
              image_size: Tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    """Camera-space road mask (255 = road) rendered from the scene's true road points."""
    rows, cols = image_size
    road = scene.cloud.points[scene.cloud.labels == ROAD, :3]
    u, v, d = project_to_image(calib, road)
    front = d > 0
    r = np.floor(v[front] + 0.5)
    c = np.floor(u[front] + 0.5)
    ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    mask = np.zeros(image_size, dtype=bool)
    mask[r[ok].astype(int), c[ok].astype(int)] = True
    # close pinholes between projected samples
    grown = mask.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            grown |= np.roll(np.roll(mask, dr, 0), dc, 1)
    return np.where(grown, 255, 0).astype(np.uint8)
