"""
Rasterisation of point clouds into bird-eye-view (BEV) and spherical
front-view (SFV) grid images, and of per-point labels into label grids.

Grid images are ``(H, W, C)`` float32.  BEV channels are
``(mean z, max z, mean intensity, count)``; SFV channels are
``(x, y, z, intensity, range, mask)``.  Label grids are ``(H, W)`` uint8.

Binning is computed in float64 from the float32 coordinates stored in the
cloud, so results do not depend on how the caller produced the floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .pointcloud import Point, PointCloud, RoiSpec

BACKGROUND, ROAD, VEHICLE = 0, 1, 2
NUM_CLASSES = 3
CLASS_NAMES = ("background", "road", "vehicle")
CLASS_COLORS = np.array([[128, 128, 128], [0, 200, 0], [220, 0, 0]], dtype=np.uint8)

BEV_CHANNELS = ("mean_z", "max_z", "mean_intensity", "count")
SFV_CHANNELS = ("x", "y", "z", "intensity", "range", "mask")


@dataclass(frozen=True)
class BevSpec:
    roi: RoiSpec = field(default_factory=RoiSpec)
    cell_x: float = 0.2
    cell_y: float = 0.3
    height: int = 256
    width: int = 64
    z_lo: float = -3.0
    z_hi: float = 3.0
    count_cap: int = 64

    def __post_init__(self):
        if min(self.cell_x, self.cell_y) <= 0 or min(self.height, self.width) <= 0:
            raise ValueError(f"non-positive BEV grid parameters: {self}")
        if not self.z_lo < self.z_hi or self.count_cap <= 0:
            raise ValueError(f"bad BEV normalisation range: {self}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.height, self.width, 4)


@dataclass(frozen=True)
class SfvSpec:
    azimuth_fov: float = 90.0   # degrees, centred on +x
    zenith_min: float = -24.9   # degrees
    zenith_max: float = 2.0
    rows: int = 64
    cols: int = 512

    def __post_init__(self):
        if not self.zenith_min < self.zenith_max or self.azimuth_fov <= 0:
            raise ValueError(f"bad SFV field of view: {self}")
        if min(self.rows, self.cols) <= 0:
            raise ValueError(f"bad SFV resolution: {self}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.rows, self.cols, 6)

    @property
    def d_theta(self) -> float:
        return math.radians(self.zenith_max - self.zenith_min) / self.rows

    @property
    def d_phi(self) -> float:
        return math.radians(self.azimuth_fov) / self.cols


GridSpec = Union[BevSpec, SfvSpec]


@dataclass(frozen=True, eq=False)
class GridImage:
    data: np.ndarray
    kind: str  # "bev" or "sfv"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        want = {"bev": 4, "sfv": 6}.get(self.kind)
        if want is None or data.ndim != 3 or data.shape[2] != want:
            raise ValueError(f"bad {self.kind!r} grid image of shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))


# ----------------------------------------------------------------------------
# BEV
# ----------------------------------------------------------------------------

def _bev_cells(points: np.ndarray, spec: BevSpec):
    x = points[:, 0].astype(np.float64)
    y = points[:, 1].astype(np.float64)
    r = np.floor((x - spec.roi.x_min) / spec.cell_x)
    c = np.floor((y - spec.roi.y_min) / spec.cell_y)
    valid = (r >= 0) & (r < spec.height) & (c >= 0) & (c < spec.width)
    flat = np.where(valid, r * spec.width + c, 0).astype(np.int64)
    return valid, flat


def bev_bin(p: Point, spec: BevSpec) -> Optional[Tuple[int, int]]:
    """Grid cell ``(row, col)`` of a point, or None when it falls off the grid."""
    valid, flat = _bev_cells(np.array([[p[0], p[1]]], dtype=np.float32), spec)
    if not valid[0]:
        return None
    return divmod(int(flat[0]), spec.width)


def project_bev(cloud: PointCloud, spec: BevSpec = BevSpec(), normalize: bool = True) -> GridImage:
    n_cells = spec.height * spec.width
    valid, flat = _bev_cells(cloud.points, spec)
    cells = flat[valid]
    z = cloud.z[valid].astype(np.float64)
    inten = cloud.intensity[valid].astype(np.float64)

    count = np.bincount(cells, minlength=n_cells)
    occupied = count > 0
    denom = np.maximum(count, 1)
    max_z = np.full(n_cells, -np.inf)
    np.maximum.at(max_z, cells, z)

    raw = np.zeros((n_cells, 4), dtype=np.float64)
    raw[:, 0] = np.bincount(cells, weights=z, minlength=n_cells) / denom
    raw[:, 1] = np.where(occupied, max_z, 0.0)
    raw[:, 2] = np.bincount(cells, weights=inten, minlength=n_cells) / denom
    raw[:, 3] = count
    img = GridImage(raw.reshape(spec.height, spec.width, 4).astype(np.float32), "bev")
    return normalize_bev(img, spec) if normalize else img


def normalize_bev(raw: GridImage, spec: BevSpec = BevSpec()) -> GridImage:
    """Map raw BEV statistics into [0, 1] with fixed ranges.

    Elevations use ``[z_lo, z_hi]``, counts saturate at ``count_cap``.
    Empty cells stay zero in every channel.
    """
    d = raw.data.astype(np.float64)
    occupied = d[..., 3] > 0
    out = np.empty_like(d)
    span = spec.z_hi - spec.z_lo
    out[..., :2] = np.clip((d[..., :2] - spec.z_lo) / span, 0.0, 1.0)
    out[..., 2] = np.clip(d[..., 2], 0.0, 1.0)
    out[..., 3] = np.minimum(d[..., 3], spec.count_cap) / spec.count_cap
    out[~occupied] = 0.0
    return GridImage(out.astype(np.float32), "bev")


# ----------------------------------------------------------------------------
# SFV
# ----------------------------------------------------------------------------

def sfv_angles(p: Point) -> Tuple[float, float]:
    """Elevation ``theta = asin(z / r)`` and horizontal angle ``phi = asin(y / rho)``."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0:
        raise ValueError("angles are undefined for a point at the origin")
    rho = math.sqrt(x * x + y * y)
    phi = math.asin(y / rho) if rho > 0 else 0.0
    return math.asin(z / r), phi


def _sfv_cells(points: np.ndarray, spec: SfvSpec):
    x = points[:, 0].astype(np.float64)
    y = points[:, 1].astype(np.float64)
    z = points[:, 2].astype(np.float64)
    r = np.sqrt(x * x + y * y + z * z)
    rho = np.sqrt(x * x + y * y)
    # asin(y / rho) aliases rear returns onto the front, so the field of view needs x > 0
    front = x > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.arcsin(np.where(front, z / r, 0.0))
        phi = np.arcsin(np.where(front, y / rho, 0.0))
    half = math.radians(spec.azimuth_fov) / 2
    t_lo, t_hi = math.radians(spec.zenith_min), math.radians(spec.zenith_max)
    valid = front & (np.abs(phi) <= half) & (theta >= t_lo) & (theta <= t_hi)
    u = np.minimum(np.floor((theta - t_lo) / spec.d_theta), spec.rows - 1)
    v = np.minimum(np.floor((phi + half) / spec.d_phi), spec.cols - 1)
    row = spec.rows - 1 - u  # top row holds the highest elevation
    flat = np.where(valid, row * spec.cols + v, 0).astype(np.int64)
    return valid, flat, r


def project_sfv(cloud: PointCloud, spec: SfvSpec = SfvSpec()) -> GridImage:
    n_cells = spec.rows * spec.cols
    valid, flat, r = _sfv_cells(cloud.points, spec)
    idx = np.flatnonzero(valid)
    out = np.zeros((n_cells, 6), dtype=np.float32)
    if idx.size:
        cells, rv = flat[idx], r[idx]
        order = np.lexsort((idx, rv, cells))  # nearest return wins, then file order
        cells_sorted = cells[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = cells_sorted[1:] != cells_sorted[:-1]
        win = order[first]
        src = idx[win]
        out[cells[win], :4] = cloud.points[src]
        out[cells[win], 4] = rv[win]
        out[cells[win], 5] = 1.0
    return GridImage(out.reshape(spec.rows, spec.cols, 6), "sfv")


# ----------------------------------------------------------------------------
# Labels and dispatch
# ----------------------------------------------------------------------------

def grid_cells(cloud: PointCloud, spec: GridSpec):
    """Per-point ``(valid, flat cell index)`` for either view."""
    if isinstance(spec, BevSpec):
        return _bev_cells(cloud.points, spec)
    valid, flat, _ = _sfv_cells(cloud.points, spec)
    return valid, flat


def grid_hw(spec: GridSpec) -> Tuple[int, int]:
    return spec.shape[:2]


def project(cloud: PointCloud, spec: GridSpec) -> GridImage:
    return project_bev(cloud, spec) if isinstance(spec, BevSpec) else project_sfv(cloud, spec)


def rasterize_labels(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    """Majority class per cell; ties go to vehicle, then road.  Empty cells are background."""
    if cloud.labels is None:
        raise ValueError("cloud has no labels")
    h, w = grid_hw(spec)
    valid, flat = grid_cells(cloud, spec)
    lab = cloud.labels[valid].astype(np.int64)
    if lab.size and lab.max() >= NUM_CLASSES:
        raise ValueError(f"label {lab.max()} out of range")
    votes = np.bincount(flat[valid] * NUM_CLASSES + lab,
                        minlength=h * w * NUM_CLASSES).reshape(h * w, NUM_CLASSES)
    # class id doubles as tie-break priority: vehicle(2) > road(1) > background(0)
    score = votes * NUM_CLASSES + np.arange(NUM_CLASSES)
    grid = np.argmax(score, axis=1).astype(np.uint8)
    grid[votes.sum(axis=1) == 0] = BACKGROUND
    return grid.reshape(h, w)


def labels_to_ppm_rgb(labels: np.ndarray) -> np.ndarray:
    return CLASS_COLORS[np.asarray(labels, dtype=np.intp)]


def channel_to_gray(img: GridImage, channel: int) -> np.ndarray:
    """Scale one channel into 8-bit gray; BEV is already in [0, 1], SFV is min-max scaled."""
    ch = img.data[..., channel].astype(np.float64)
    if img.kind == "sfv":
        lo, hi = ch.min(), ch.max()
        ch = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
    return np.round(np.clip(ch, 0, 1) * 255).astype(np.uint8)
