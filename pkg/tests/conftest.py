import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rkhs_slam.cloud import ColoredPointCloud
from rkhs_slam.se3 import Pose


def random_cloud(rng, n=200, extent=1.0, center=(0.0, 0.0, 1.5)):
    points = rng.uniform(-extent / 2, extent / 2, (n, 3)) + np.asarray(center)
    labels = rng.uniform(0.0, 1.0, (n, 5))
    return ColoredPointCloud(points, labels)


def random_pose(rng, max_deg, max_trans):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_deg))
    t = rng.normal(size=3)
    t *= rng.uniform(0.0, max_trans) / np.linalg.norm(t)
    return Pose(Rotation.from_rotvec(angle * axis).as_matrix(), t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    if report.when == "call" or report.outcome != "passed":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if _criteria.get(n) != "FAIL":
            _criteria[n] = status


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    import sys

    details = getattr(sys.modules.get("test_acceptance"), "DETAILS", {})
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n:2d}: {_criteria[n]}  {details.get(n, '')}")
