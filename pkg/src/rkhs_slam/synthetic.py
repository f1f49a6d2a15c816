"""Ray-cast RGB-D rendering of a textured box room, written as a TUM sequence."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset import CameraIntrinsics, TUM_INTRINSICS
from .evaluation import TrajectoryEstimate, write_tum
from .se3 import Pose, exp

PIXELS_PER_METER = 150


@dataclass
class _Plane:
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    size: tuple
    texture: np.ndarray

    @property
    def normal(self):
        return np.cross(self.axis_u, self.axis_v)


def _texture(rng, width_m, height_m):
    w, h = int(width_m * PIXELS_PER_METER), int(height_m * PIXELS_PER_METER)
    img = np.empty((h, w, 3), np.uint8)
    img[:] = rng.integers(40, 215, 3)
    n_shapes = int(60 * width_m * height_m)
    for _ in range(n_shapes):
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
        size = int(rng.integers(4, 30))
        if rng.random() < 0.5:
            cv2.circle(img, (x, y), size, color, -1)
        else:
            cv2.rectangle(img, (x, y), (x + size, y + int(rng.integers(4, 30))), color, -1)
    noise = rng.normal(0, 6, img.shape)
    return cv2.GaussianBlur(np.clip(img + noise, 0, 255).astype(np.uint8), (0, 0), 0.8)


class SyntheticRoom:
    """Axis-aligned room ``[-hx, hx] x [-top, floor] x [-hz, hz]`` with textured faces.

    Camera convention: x right, y down, z forward.
    """

    def __init__(self, seed=0, half_x=3.0, half_z=3.0, floor=1.2, top=1.8):
        rng = np.random.default_rng(seed)
        ex, ey, ez = np.eye(3)
        h = floor + top
        specs = [
            (np.array([-half_x, -top, half_z]), ex, ey, (2 * half_x, h)),     # front (+z)
            (np.array([half_x, -top, -half_z]), -ex, ey, (2 * half_x, h)),    # back (-z)
            (np.array([-half_x, -top, -half_z]), ez, ey, (2 * half_z, h)),    # left (-x)
            (np.array([half_x, -top, half_z]), -ez, ey, (2 * half_z, h)),     # right (+x)
            (np.array([-half_x, floor, -half_z]), ex, ez, (2 * half_x, 2 * half_z)),  # floor
            (np.array([-half_x, -top, half_z]), ex, -ez, (2 * half_x, 2 * half_z)),   # ceiling
        ]
        self.planes = [_Plane(o, u, v, s, _texture(rng, *s)) for o, u, v, s in specs]

    def render(self, camera: Pose, intr: CameraIntrinsics):
        """Noise-free RGB (uint8) and metric depth (float, 0 where nothing is hit)."""
        u, v = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
        rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
        dirs = rays @ camera.rotation.T
        origin = camera.translation
        depth = np.full(u.shape, np.inf)
        rgb = np.zeros(u.shape + (3,), np.float32)
        for plane in self.planes:
            n = plane.normal
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = ((plane.origin - origin) @ n) / denom
                hit = origin + lam[..., None] * dirs
                a = (hit - plane.origin) @ plane.axis_u
                b = (hit - plane.origin) @ plane.axis_v
            ok = (lam > 0) & (a >= 0) & (a <= plane.size[0]) & (b >= 0) & (b <= plane.size[1]) & (lam < depth)
            if not ok.any():
                continue
            map_x = np.where(ok, a * PIXELS_PER_METER, -1).astype(np.float32)
            map_y = np.where(ok, b * PIXELS_PER_METER, -1).astype(np.float32)
            color = cv2.remap(plane.texture, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
            rgb[ok] = color[ok]
            depth[ok] = lam[ok]
        depth[~np.isfinite(depth)] = 0.0
        return np.clip(rgb, 0, 255).astype(np.uint8), depth


def square_loop(n_frames=60, side=1.0, yaw_deg=8.0):
    """Camera poses around a horizontal square, returning to the start.

    The camera keeps facing the front wall with a gentle yaw oscillation;
    the final frame is one step short of the starting pose.
    """
    corners = np.array([[0, 0, 0], [side, 0, 0], [side, 0, side], [0, 0, side]], float)
    corners -= corners.mean(axis=0)
    corners[:, 2] -= 0.5
    poses = []
    for k in range(n_frames):
        s = 4.0 * k / n_frames
        leg = int(s)
        frac = s - leg
        pos = corners[leg] + frac * (corners[(leg + 1) % 4] - corners[leg])
        yaw = np.deg2rad(yaw_deg) * np.sin(2 * np.pi * k / n_frames)
        poses.append(Pose(exp([0, yaw, 0, 0, 0, 0]).rotation, pos))
    return poses


def write_sequence(root, n_frames=60, seed=0, intr: CameraIntrinsics | None = None, rate=30.0,
                   depth_noise=0.003, color_noise=2.0, poses=None):
    """Render a square-loop sequence in the TUM directory layout; returns the ground truth."""
    intr = intr or TUM_INTRINSICS["fr1"]
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    room = SyntheticRoom(seed)
    rng = np.random.default_rng(seed + 1)
    poses = square_loop(n_frames) if poses is None else poses
    stamps = 1.0 + np.arange(len(poses)) / rate
    rgb_rows, depth_rows = ["# color images"], ["# depth maps"]
    for t, pose in zip(stamps, poses):
        rgb, depth = room.render(pose, intr)
        rgb = np.clip(rgb + rng.normal(0, color_noise, rgb.shape), 0, 255).astype(np.uint8)
        noisy = depth + rng.normal(0, 1, depth.shape) * depth_noise * depth**2
        raw = np.where(depth > 0, np.rint(noisy * intr.depth_scale), 0).astype(np.uint16)
        name = f"{t:.6f}.png"
        cv2.imwrite(str(root / "rgb" / name), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(root / "depth" / name), raw)
        rgb_rows.append(f"{t:.6f} rgb/{name}")
        depth_rows.append(f"{t:.6f} depth/{name}")
    (root / "rgb.txt").write_text("\n".join(rgb_rows) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_rows) + "\n")
    gt = TrajectoryEstimate(stamps, poses)
    write_tum(gt, root / "groundtruth.txt")
    return gt
