import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cloud(rng, n, x=(-5, 60), y=(-10, 16), z=(-4, 4), labels=False):
    from salsanet.pointcloud import PointCloud
    pts = np.c_[rng.uniform(*x, n), rng.uniform(*y, n), rng.uniform(*z, n), rng.uniform(0, 1, n)]
    lab = rng.integers(0, 3, n) if labels else None
    return PointCloud(pts.astype(np.float32), lab)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
