"""TUM RGB-D sequence loading and gradient-based point selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import cv2
import numpy as np

from .cloud import ColoredPointCloud
from .evaluation import associate
from .se3 import Pose

logger = logging.getLogger(__name__)

BLOCK_SIZE = 32
GRADIENT_OFFSET = 7.0
COUNT_TOLERANCE = 0.2


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 5000.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


# Calibrations published with the TUM RGB-D benchmark.
TUM_INTRINSICS = {
    "fr1": CameraIntrinsics(517.3, 516.5, 318.6, 255.3),
    "fr2": CameraIntrinsics(520.9, 521.0, 325.1, 249.7),
    "fr3": CameraIntrinsics(535.4, 539.2, 320.1, 247.6),
}


@dataclass(frozen=True)
class FramePair:
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray
    ground_truth: Optional[Pose] = None
    index: int = 0

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("rgb image must be HxWx3")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ValueError("rgb and depth resolution differ")

    def gray(self) -> np.ndarray:
        return cv2.cvtColor(self.rgb, cv2.COLOR_RGB2GRAY)


def backproject(u, v, depth, intr: CameraIntrinsics):
    """Pixel coordinates and metric depth to camera-frame points, ``z * K^-1 (u, v, 1)``."""
    u, v, z = (np.asarray(a, dtype=float) for a in (u, v, depth))
    return np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=-1)


def project(points, intr: CameraIntrinsics):
    """Camera-frame points to pixel coordinates; returns ``(u, v)`` arrays."""
    p = np.asarray(points, dtype=float)
    return intr.fx * p[..., 0] / p[..., 2] + intr.cx, intr.fy * p[..., 1] / p[..., 2] + intr.cy


def decode_depth(raw, intr: CameraIntrinsics):
    """16-bit depth image to meters; zero stays zero (invalid)."""
    return np.asarray(raw, dtype=float) / intr.depth_scale


def _read_index(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing index file: {path}")
    stamps, payloads = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            try:
                if len(fields) < 2:
                    raise ValueError("expected a timestamp and a payload")
                stamps.append(float(fields[0]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            payloads.append(fields[1:])
    order = np.argsort(stamps, kind="stable")
    return np.asarray(stamps)[order], [payloads[k] for k in order]


def _parse_groundtruth(path: Path, stamps, payloads):
    poses = []
    for t, fields in zip(stamps, payloads):
        try:
            if len(fields) != 7:
                raise ValueError(f"expected 7 pose values, got {len(fields)}")
            values = [float(v) for v in fields]
            poses.append(Pose.from_quaternion(values[:3], values[3:]))
        except ValueError as exc:
            raise ValueError(f"{path}: timestamp {t}: {exc}") from None
    return poses


class TUMSequence:
    """Associated RGB/depth (and optional ground-truth) frames of a TUM directory.

    Index files are parsed eagerly so that missing or malformed files fail
    before any tracking starts; images are decoded lazily during iteration.
    """

    def __init__(self, root, tolerance=0.02, max_frames=None):
        self.root = Path(root)
        rgb_t, rgb_p = _read_index(self.root / "rgb.txt")
        depth_t, depth_p = _read_index(self.root / "depth.txt")
        pairs = associate(rgb_t, depth_t, tolerance)
        self.skipped = len(rgb_t) - len(pairs)
        if self.skipped:
            logger.info("%s: %d rgb frames without depth within %.3f s skipped",
                        self.root, self.skipped, tolerance)
        self.entries = [(rgb_t[i], rgb_p[i][0], depth_p[j][0]) for i, j in pairs]
        if max_frames is not None:
            self.entries = self.entries[:max_frames]

        self.groundtruth = None
        self._gt_for = {}
        gt_path = self.root / "groundtruth.txt"
        if gt_path.is_file():
            gt_t, gt_p = _read_index(gt_path)
            gt_poses = _parse_groundtruth(gt_path, gt_t, gt_p)
            self.groundtruth = (gt_t, gt_poses)
            for i, j in associate([e[0] for e in self.entries], gt_t, tolerance):
                self._gt_for[i] = gt_poses[j]

    def __len__(self):
        return len(self.entries)

    def _load(self, rel, flags):
        path = self.root / rel
        img = cv2.imread(str(path), flags)
        if img is None:
            raise FileNotFoundError(f"cannot read image: {path}")
        return img

    def __iter__(self) -> Iterator[FramePair]:
        for k, (t, rgb_rel, depth_rel) in enumerate(self.entries):
            bgr = self._load(rgb_rel, cv2.IMREAD_COLOR)
            depth = self._load(depth_rel, cv2.IMREAD_UNCHANGED)
            rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
            yield FramePair(float(t), rgb, depth, self._gt_for.get(k), k)


def load_sequence(root, tolerance=0.02, max_frames=None) -> TUMSequence:
    return TUMSequence(root, tolerance, max_frames)


def image_gradients(rgb):
    """Gray image and its central-difference gradients (zero on the border)."""
    rgb = np.asarray(rgb, dtype=float)
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    gy[1:-1, :] = 0.5 * (gray[2:, :] - gray[:-2, :])
    return gray, gx, gy


def _block_medians(mag, valid):
    h, w = mag.shape
    med = np.zeros_like(mag)
    for r in range(0, h, BLOCK_SIZE):
        for c in range(0, w, BLOCK_SIZE):
            blk = mag[r:r + BLOCK_SIZE, c:c + BLOCK_SIZE]
            ok = valid[r:r + BLOCK_SIZE, c:c + BLOCK_SIZE]
            med[r:r + BLOCK_SIZE, c:c + BLOCK_SIZE] = np.median(blk[ok]) if ok.any() else np.inf
    return med


def _fill_sparse_regions(selected, excess, valid, deficit):
    # best pixel of every still-empty cell; the cell size spreads roughly
    # `deficit` extra points over the valid area
    h, w = selected.shape
    cell = max(1, int(np.sqrt(valid.sum() / deficit)))
    out = selected.copy()
    for r in range(0, h, cell):
        for c in range(0, w, cell):
            sel = out[r:r + cell, c:c + cell]
            ok = valid[r:r + cell, c:c + cell] & ~sel
            if sel.any() or not ok.any():
                continue
            score = np.where(ok, excess[r:r + cell, c:c + cell], -np.inf)
            k = np.unravel_index(np.argmax(score), score.shape)
            sel[k] = True
    return out


def select_pixels(rgb, depth_m, target=3000):
    """Boolean mask of selected pixels plus the gradients used to pick them."""
    _, gx, gy = image_gradients(rgb)
    mag = np.hypot(gx, gy)
    valid = np.isfinite(depth_m) & (depth_m > 0)
    valid[[0, -1], :] = False
    valid[:, [0, -1]] = False
    if not valid.any():
        raise ValueError("frame has no pixel with valid depth")

    excess = mag - _block_medians(mag, valid)
    selected = valid & (excess > GRADIENT_OFFSET)
    n = int(selected.sum())
    if abs(n - target) > COUNT_TOLERANCE * target:
        # rescale the offset once so that about `target` pixels pass
        ranked = np.sort(excess[valid])[::-1]
        offset = ranked[min(target, ranked.size - 1)]
        selected = valid & (excess > offset)
        n = int(selected.sum())
    if n < (1 - COUNT_TOLERANCE) * target:
        selected = _fill_sparse_regions(selected, excess, valid, target - n)
    return selected, gx, gy


def select_points(frame: FramePair, intr: CameraIntrinsics, target=3000) -> ColoredPointCloud:
    """High-gradient pixels with valid depth as a labeled point cloud.

    Labels are (R, G, B, |gx|, |gy|) in [0, 1]; both gradient channels share
    one scale, the largest gradient component among the selected pixels.
    """
    depth = decode_depth(frame.depth, intr)
    selected, gx, gy = select_pixels(frame.rgb, depth, target)
    v, u = np.nonzero(selected)
    points = backproject(u, v, depth[v, u], intr)
    grads = np.abs(np.stack([gx[v, u], gy[v, u]], axis=1))
    scale = grads.max()
    if scale > 0:
        grads = grads / scale
    labels = np.concatenate([frame.rgb[v, u].astype(float) / 255.0, grads], axis=1)
    return ColoredPointCloud(points, np.clip(labels, 0.0, 1.0), frame.timestamp)
