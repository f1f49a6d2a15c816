"""Trajectory error metrics in the TUM benchmark convention."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import se3
from .se3 import Pose

ASSOCIATION_TOLERANCE = 0.02


class InsufficientOverlapError(ValueError):
    """Too few timestamp matches between two trajectories."""


class TrajectoryEstimate:
    """Timestamped global poses with strictly increasing timestamps."""

    def __init__(self, timestamps, poses):
        self.timestamps = np.asarray(timestamps, dtype=float).reshape(-1)
        self.poses = list(poses)
        if len(self.poses) == 0:
            raise ValueError("trajectory must contain at least one pose")
        if len(self.poses) != len(self.timestamps):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not all(isinstance(p, Pose) for p in self.poses):
            raise TypeError("poses must be Pose instances")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    def positions(self):
        return np.array([p.translation for p in self.poses])

    def transformed(self, g: Pose) -> "TrajectoryEstimate":
        return TrajectoryEstimate(self.timestamps, [g @ p for p in self.poses])


def read_tum(path) -> TrajectoryEstimate:
    """Read ``timestamp tx ty tz qx qy qz qw`` rows; ``#`` starts a comment."""
    path = Path(path)
    stamps, poses = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.replace(",", " ").split()
            try:
                if len(fields) != 8:
                    raise ValueError(f"expected 8 fields, got {len(fields)}")
                values = [float(v) for v in fields]
                poses.append(Pose.from_quaternion(values[1:4], values[4:8]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            stamps.append(values[0])
    if not stamps:
        raise ValueError(f"{path}: no poses")
    return TrajectoryEstimate(stamps, poses)


def write_tum(traj: TrajectoryEstimate, path) -> None:
    with Path(path).open("w") as fh:
        for t, pose in traj:
            vals = np.concatenate([pose.translation, pose.as_quaternion()])
            fh.write(f"{t:.6f} " + " ".join(f"{v:.9f}" for v in vals) + "\n")


def associate(a, b, tolerance=ASSOCIATION_TOLERANCE):
    """Pair indices of ``a`` and ``b`` with the nearest timestamp within tolerance.

    Greedy by increasing time gap; each index is used at most once. Returns
    index pairs sorted by ``a``'s timestamps.
    """
    ta = np.asarray(a, dtype=float)
    tb = np.asarray(b, dtype=float)
    candidates = []
    for i, t in enumerate(ta):
        k = np.searchsorted(tb, t)
        for j in (k - 1, k):
            if 0 <= j < len(tb) and abs(tb[j] - t) <= tolerance:
                candidates.append((abs(tb[j] - t), i, j))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def rigid_alignment(src, dst) -> Pose:
    """Least-squares rotation and translation mapping ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    return Pose(R, mu_d - R @ mu_s)


def ate_rmse(est: TrajectoryEstimate, gt: TrajectoryEstimate, tolerance=ASSOCIATION_TOLERANCE) -> float:
    """Absolute trajectory error (m) after rigid alignment of ``est`` onto ``gt``."""
    pairs = associate(est.timestamps, gt.timestamps, tolerance)
    if len(pairs) < 3:
        raise InsufficientOverlapError(f"ATE needs >= 3 associated poses, found {len(pairs)}")
    idx_e, idx_g = np.array(pairs).T
    p_est = est.positions()[idx_e]
    p_gt = gt.positions()[idx_g]
    align = rigid_alignment(p_est, p_gt)
    residual = align.apply(p_est) - p_gt
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def rpe_rmse(est: TrajectoryEstimate, gt: TrajectoryEstimate, delta=1.0,
             tolerance=ASSOCIATION_TOLERANCE) -> tuple[float, float]:
    """Relative pose error over ``delta``-second windows: (m/s, deg/s) RMSE."""
    pairs = dict(associate(est.timestamps, gt.timestamps, tolerance))
    ts = est.timestamps
    trans, rot = [], []
    for i in range(len(ts)):
        if i not in pairs:
            continue
        k = int(np.searchsorted(ts, ts[i] + delta))
        near = [j for j in (k - 1, k) if i < j < len(ts)]
        if not near:
            continue
        j = min(near, key=lambda j: abs(ts[j] - ts[i] - delta))
        if abs(ts[j] - ts[i] - delta) > tolerance or j not in pairs:
            continue
        q_rel = gt.poses[pairs[i]].inverse() @ gt.poses[pairs[j]]
        p_rel = est.poses[i].inverse() @ est.poses[j]
        err = q_rel.inverse() @ p_rel
        trans.append(np.linalg.norm(err.translation) / delta)
        rot.append(np.rad2deg(se3.rotation_angle(err)) / delta)
    if not trans:
        raise InsufficientOverlapError(f"no pose pairs {delta} s apart")
    return float(np.sqrt(np.mean(np.square(trans)))), float(np.sqrt(np.mean(np.square(rot))))
