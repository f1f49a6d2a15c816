import numpy as np
import pytest

from rkhs_slam.dataset import CameraIntrinsics, decode_depth, load_sequence
from rkhs_slam.se3 import Pose
from rkhs_slam.synthetic import SyntheticRoom, square_loop, write_sequence

SMALL = CameraIntrinsics(100.0, 100.0, 79.5, 59.5, 5000.0, 160, 120)


def test_ray_cast_depths():
    intr = CameraIntrinsics(100.0, 100.0, 80.0, 60.0, 5000.0, 160, 120)
    rgb, depth = SyntheticRoom(0).render(Pose.identity(), intr)
    assert rgb.shape == (120, 160, 3) and rgb.dtype == np.uint8
    # centre ray hits the front wall at z = 3
    assert depth[60, 80] == pytest.approx(3.0, abs=1e-12)
    # bottom row hits the floor at y = 1.2: z = 1.2 * fy / (v - cy)
    assert depth[119, 80] == pytest.approx(1.2 * 100.0 / 59.0, abs=1e-9)
    assert np.all(depth > 0)


def test_square_loop():
    poses = square_loop(60, side=1.0)
    assert len(poses) == 60
    steps = [np.linalg.norm(b.translation - a.translation) for a, b in zip(poses, poses[1:] + poses[:1])]
    assert np.allclose(steps, 4.0 / 60, atol=1e-12)
    for p in poses:
        assert np.allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-12)


def test_written_sequence_loads(tmp_path):
    gt = write_sequence(tmp_path, n_frames=3, intr=SMALL)
    seq = load_sequence(tmp_path)
    frames = list(seq)
    assert len(frames) == 3 and seq.skipped == 0
    assert np.allclose(frames[1].timestamp, 1.0 + 1 / 30, atol=1e-6)
    assert frames[2].ground_truth.allclose(gt.poses[2], atol=1e-8)
    clean = SyntheticRoom(0).render(gt.poses[0], SMALL)[1]
    depth = decode_depth(frames[0].depth, SMALL)
    # depth noise is 0.003 z^2 per pixel; allow 6 sigma plus quantization
    assert np.all(np.abs(depth - clean) <= 6 * 0.003 * clean**2 + 1e-4)
