import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salsanet.autolabel import SegMask, label_from_boxes, label_from_mask, mask_from_pgm, merge_labels
from salsanet.geometry import Box3D, lidar_to_pixel, parse_kitti_calib
from salsanet.pnm import write_pgm
from salsanet.pointcloud import Point, PointCloud
from salsanet.projection import BACKGROUND, ROAD, VEHICLE
from salsanet.synthetic import KITTI_LIKE_CALIB

IDENTITY = parse_kitti_calib("""P2: 100 0 50 0 0 100 50 0 0 0 1 0
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0
""")


def test_segmask_rejects_empty():
    with pytest.raises(ValueError):
        SegMask(np.zeros((0, 4)))


def test_mask_from_pgm_threshold():
    gray = np.array([[0, 127, 128, 255]], np.uint8)
    mask = mask_from_pgm(write_pgm(gray))
    assert mask.data.tolist() == [[0, 0, ROAD, ROAD]]
    assert (mask.height, mask.width) == (1, 4)


def test_behind_camera_is_background():
    mask = SegMask(np.full((100, 100), ROAD))
    cloud = PointCloud.from_points([[0, 0, -5, 0], [0, 0, 0, 0]])
    assert label_from_mask(cloud, IDENTITY, mask).tolist() == [BACKGROUND, BACKGROUND]


def test_direct_lookup():
    data = np.zeros((100, 100), np.uint8)
    data[50, 50] = ROAD
    cloud = PointCloud.from_points([[0, 0, 10, 0], [0.5, 0, 10, 0], [0, 0, 20, 0]])
    assert label_from_mask(cloud, IDENTITY, SegMask(data)).tolist() == [ROAD, BACKGROUND, ROAD]


def test_outside_mask_is_background():
    mask = SegMask(np.full((100, 100), ROAD))
    cloud = PointCloud.from_points([[10, 0, 10, 0], [0, -6, 10, 0]])  # u = 150, v = -10
    assert label_from_mask(cloud, IDENTITY, mask).tolist() == [BACKGROUND, BACKGROUND]


def test_checkerboard_against_lookup_oracle(rng):
    h, w = 375, 1242
    rows, cols = np.indices((h, w))
    board = np.where(((rows // 25) + (cols // 25)) % 2 == 0, ROAD, BACKGROUND).astype(np.uint8)
    n = 1000
    pts = np.c_[rng.uniform(-10, 60, n), rng.uniform(-30, 30, n), rng.uniform(-3, 2, n), rng.uniform(0, 1, n)]
    cloud = PointCloud(pts.astype(np.float32))
    got = label_from_mask(cloud, KITTI_LIKE_CALIB, SegMask(board))
    expect = []
    for p in cloud:
        pix = lidar_to_pixel(KITTI_LIKE_CALIB, p)
        if pix is None:
            expect.append(BACKGROUND)
            continue
        c, r = math.floor(pix[0] + 0.5), math.floor(pix[1] + 0.5)
        expect.append(int(board[r, c]) if 0 <= r < h and 0 <= c < w else BACKGROUND)
    assert got.tolist() == expect
    assert 100 < np.count_nonzero(got) < 900


def test_boxes_examples():
    cloud = PointCloud.from_points([[0, 0, 0, 0], [5, 5, 5, 0], [0.5, 0, 0, 0]])
    assert label_from_boxes(cloud, []).tolist() == [0, 0, 0]
    a = Box3D((0, 0, 0), (2, 2, 2))
    b = Box3D((0.5, 0, 0), (2, 2, 2))
    assert label_from_boxes(cloud, [a]).tolist() == [VEHICLE, 0, VEHICLE]
    assert label_from_boxes(cloud, [a, b]).tolist() == [VEHICLE, 0, VEHICLE]


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4))
def test_boxes_monotone(seed, n_boxes):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(-5, 5, (300, 4)))
    boxes = [Box3D(tuple(rng.uniform(-3, 3, 3)), tuple(rng.uniform(0.5, 4, 3)), rng.uniform(-3, 3))
             for _ in range(n_boxes + 1)]
    before = label_from_boxes(cloud, boxes[:-1])
    after = label_from_boxes(cloud, boxes)
    assert len(after) == len(cloud)
    assert np.all(after[before == VEHICLE] == VEHICLE)


@pytest.mark.parametrize("road, veh, expect", [
    (ROAD, VEHICLE, VEHICLE), (ROAD, BACKGROUND, ROAD), (BACKGROUND, BACKGROUND, BACKGROUND),
    (BACKGROUND, VEHICLE, VEHICLE),
])
def test_merge_examples(road, veh, expect):
    assert merge_labels([road], [veh]).tolist() == [expect]


def test_merge_length_mismatch():
    with pytest.raises(ValueError):
        merge_labels([0, 1], [0])


@given(st.lists(st.tuples(st.sampled_from([0, 1]), st.sampled_from([0, 2]))))
def test_merge_never_downgrades_vehicle(pairs):
    road = [p[0] for p in pairs]
    veh = [p[1] for p in pairs]
    out = merge_labels(road, veh)
    assert len(out) == len(pairs)
    assert all(o == VEHICLE for o, v in zip(out, veh) if v == VEHICLE)
