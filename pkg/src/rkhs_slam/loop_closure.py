"""Loop-closure detection, geometric initialization and inner-product validation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .cloud import ColoredPointCloud
from .dataset import CameraIntrinsics, backproject
from .registration import RegistrationConfig, inner_product, register
from .se3 import Pose

logger = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    """Point pairs do not determine a rigid transform."""


@dataclass(frozen=True)
class LoopClosureConfig:
    eta_thres: float = 0.3
    ratio: float = 0.7
    min_matches: int = 5
    ransac_iterations: int = 500
    inlier_threshold: float = 0.05
    early_exit_ratio: float = 0.8
    n_features: int = 1000

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if not self.eta_thres > 0 or not self.inlier_threshold > 0:
            raise ValueError("eta_thres and inlier_threshold must be positive")
        if self.min_matches < 3 or self.ransac_iterations < 1 or self.n_features < 1:
            raise ValueError("min_matches >= 3, ransac_iterations >= 1, n_features >= 1 required")
        if not 0 < self.early_exit_ratio <= 1:
            raise ValueError("early_exit_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class FeatureSet:
    """Keypoints with valid depth: ``keypoints`` rows are (u, v, octave, angle_rad)."""

    keypoints: np.ndarray
    descriptors: np.ndarray
    depths: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        n = len(self.keypoints)
        if not (len(self.descriptors) == len(self.depths) == len(self.points) == n):
            raise ValueError("feature arrays differ in length")
        if n and not (np.all(np.isfinite(self.depths)) and np.all(self.depths > 0)):
            raise ValueError("feature depths must be positive and finite")

    def __len__(self):
        return len(self.keypoints)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros((0, 32), np.uint8), np.zeros(0), np.zeros((0, 3)))


def _gray(image):
    image = np.asarray(image)
    return cv2.cvtColor(image, cv2.COLOR_RGB2GRAY) if image.ndim == 3 else image


def orb_descriptors(image, n_features=1000) -> np.ndarray:
    """ORB descriptors of an image, (N, 32) uint8; no depth needed."""
    _, descriptors = cv2.ORB_create(nfeatures=n_features).detectAndCompute(_gray(image), None)
    return np.zeros((0, 32), np.uint8) if descriptors is None else descriptors


def extract_features(image, depth_m, intr: CameraIntrinsics, n_features=1000) -> FeatureSet:
    """ORB keypoints whose nearest depth pixel is valid, back-projected to 3D."""
    image = _gray(image)
    depth_m = np.asarray(depth_m, dtype=float)
    if image.shape != depth_m.shape:
        raise ValueError("image and depth resolution differ")
    orb = cv2.ORB_create(nfeatures=n_features)
    keypoints, descriptors = orb.detectAndCompute(image, None)
    if descriptors is None or not keypoints:
        return FeatureSet.empty()
    h, w = depth_m.shape
    kp = np.array([(k.pt[0], k.pt[1], k.octave, np.deg2rad(k.angle)) for k in keypoints])
    col = np.clip(np.rint(kp[:, 0]).astype(int), 0, w - 1)
    row = np.clip(np.rint(kp[:, 1]).astype(int), 0, h - 1)
    z = depth_m[row, col]
    ok = np.isfinite(z) & (z > 0)
    points = backproject(kp[ok, 0], kp[ok, 1], z[ok], intr)
    return FeatureSet(kp[ok], descriptors[ok], z[ok], points.reshape(-1, 3))


def l1_score(vi: dict, vj: dict) -> float:
    """Similarity ``1 - |vi/|vi| - vj/|vj||_1 / 2`` of two non-negative sparse vectors."""
    ni, nj = math.fsum(vi.values()), math.fsum(vj.values())
    if ni <= 0 or nj <= 0:
        raise ValueError("l1_score needs two nonzero vectors")
    # for non-negative unit-l1 vectors the score is the sum of coordinate-wise minima
    s = math.fsum(min(vi[w] / ni, vj[w] / nj) for w in vi.keys() & vj.keys())
    return min(max(s, 0.0), 1.0)


def eta_scores(current_bow: dict, history_bows: list) -> dict:
    """Normalized scores ``s(v_i, v_j) / s(v_i, v_{i-1})`` for every j <= i - 2.

    ``history_bows`` holds the vectors of all keyframes before the current
    one, oldest first. Returns an empty dict when fewer than two earlier
    keyframes exist or when the reference score is zero.
    """
    if len(history_bows) < 2 or not current_bow:
        return {}
    previous = history_bows[-1]
    if not previous:
        logger.info("previous keyframe has an empty bag of words; no loop candidates")
        return {}
    ref = l1_score(current_bow, previous)
    if ref == 0.0:
        logger.info("current and previous keyframe share no words; no loop candidates")
        return {}
    return {j: (l1_score(current_bow, v) / ref if v else 0.0) for j, v in enumerate(history_bows[:-1])}


def detect_candidates(current_bow: dict, history_bows: list, eta_thres=0.3) -> list:
    """Indices j into ``history_bows`` (never the last one) with eta >= ``eta_thres``."""
    return [j for j, eta in eta_scores(current_bow, history_bows).items() if eta >= eta_thres]


def initial_pose_svd(source, target) -> Pose:
    """Least-squares rigid transform P with ``target ~ P(source)``."""
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    dst = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("source and target differ in length")
    if len(src) < 3:
        raise DegenerateGeometryError(f"need >= 3 point pairs, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    for pts in (xs, xd):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateGeometryError("point pairs are collinear or coincident")
    U, _, Vt = np.linalg.svd(xd.T @ xs)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return Pose(R, mu_d - R @ mu_s)


@dataclass
class Matches:
    """RANSAC inliers: ``source[k]`` (in the candidate frame) pairs with ``target[k]``."""

    source: np.ndarray
    target: np.ndarray
    pose: Optional[Pose] = None
    n_putative: int = 0

    def __len__(self):
        return len(self.source)


def match_descriptors(a: FeatureSet, b: FeatureSet, ratio=0.7):
    """Index pairs (ia, ib) of Hamming nearest neighbours passing the ratio test."""
    if len(a) == 0 or len(b) < 2:
        return np.zeros((0, 2), dtype=int)
    matcher = cv2.BFMatcher(cv2.NORM_HAMMING)
    knn = matcher.knnMatch(a.descriptors, b.descriptors, k=2)
    pairs = [(m[0].queryIdx, m[0].trainIdx) for m in knn
             if len(m) == 2 and m[0].distance < ratio * m[1].distance]
    return np.array(pairs, dtype=int).reshape(-1, 2)


def match_and_ransac(current: FeatureSet, candidate: FeatureSet, cfg: LoopClosureConfig | None = None,
                     seed=0) -> Matches:
    """Inlier 3D correspondences between two feature sets.

    The model maps candidate points onto current points. Returns an empty
    :class:`Matches` when fewer than ``cfg.min_matches`` inliers survive.
    """
    cfg = cfg or LoopClosureConfig()
    empty = Matches(np.zeros((0, 3)), np.zeros((0, 3)))
    pairs = match_descriptors(current, candidate, cfg.ratio)
    empty.n_putative = len(pairs)
    if len(pairs) < max(3, cfg.min_matches):
        return empty
    dst = current.points[pairs[:, 0]]
    src = candidate.points[pairs[:, 1]]
    rng = np.random.default_rng(seed)
    best = np.zeros(len(src), dtype=bool)
    for _ in range(cfg.ransac_iterations):
        sample = rng.choice(len(src), 3, replace=False)
        try:
            model = initial_pose_svd(src[sample], dst[sample])
        except DegenerateGeometryError:
            continue
        inliers = np.linalg.norm(model.apply(src) - dst, axis=1) <= cfg.inlier_threshold
        if inliers.sum() > best.sum():
            best = inliers
            if best.mean() >= cfg.early_exit_ratio:
                break
    if best.sum() < cfg.min_matches:
        return empty
    try:
        model = initial_pose_svd(src[best], dst[best])
    except DegenerateGeometryError:
        return empty
    final = np.linalg.norm(model.apply(src) - dst, axis=1) <= cfg.inlier_threshold
    if final.sum() < cfg.min_matches:
        return empty
    return Matches(src[final], dst[final], model, len(pairs))


@dataclass
class LoopClosureCandidate:
    """Outcome of validating keyframe pair (i current, j previous).

    ``refined_pose`` maps points of keyframe j into keyframe i; the pose
    graph measurement from j to i is its inverse (:attr:`measurement`).
    """

    i: int
    j: int
    eta: float
    n_inliers: int
    initial_pose: Optional[Pose] = None
    refined_pose: Optional[Pose] = None
    alpha: float = float("nan")
    accepted: bool = False

    @property
    def measurement(self) -> Pose:
        return self.refined_pose.inverse()


def validate_and_refine(i, j, initial: Pose, cloud_i: ColoredPointCloud, cloud_j: ColoredPointCloud,
                        pose_i: Pose, pose_j: Pose, cfg: RegistrationConfig | None = None,
                        eta=float("nan"), n_inliers=0) -> LoopClosureCandidate:
    """Refine ``initial`` by registration and accept only a strict improvement.

    The refined alignment must beat the three reference alignments (none,
    the geometric initial guess, and the relative pose implied by the
    current global estimates), all compared at the initial length-scale.
    """
    cfg = cfg or RegistrationConfig()
    result = register(cloud_i, cloud_j, initial, cfg)
    relative = pose_i.inverse() @ pose_j
    references = [inner_product(cloud_i, cloud_j, h, cfg) for h in (Pose.identity(), initial, relative)]
    alpha = result.final_inner_product - max(references)
    return LoopClosureCandidate(i, j, float(eta), int(n_inliers), initial, result.pose, float(alpha),
                                bool(alpha > 0))


LOG_FIELDS = ("i", "j", "eta", "n_inliers", "alpha", "accepted")


def write_loop_closure_log(candidates, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for c in candidates:
            writer.writerow([c.i, c.j, f"{c.eta:.6f}", c.n_inliers, f"{c.alpha:.9g}", int(c.accepted)])
