"""Keyframe-based tracking and local pose-graph assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from . import se3
from ._validation import check_positive
from .cloud import ColoredPointCloud
from .pose_graph import LocalPoseGraph, default_information
from .registration import RegistrationConfig, register
from .se3 import Pose

logger = logging.getLogger(__name__)

LOG_HEADER = ("frame", "gamma", "t_norm", "theta", "new_keyframe",
              "iters_consecutive", "iters_keyframe", "converged")


class TrackerStateError(RuntimeError):
    """Operation not valid in the tracker's current state."""


@dataclass(frozen=True)
class FrontendConfig:
    t_thres: float = 0.15
    theta_thres: float = float(np.deg2rad(30.0))
    gamma_thres: float = 0.7

    def __post_init__(self):
        for name in ("t_thres", "theta_thres", "gamma_thres"):
            check_positive(name, getattr(self, name))


@dataclass
class KeyframeRecord:
    """A keyframe's cloud and pose plus what loop closure attaches to it.

    ``reference_inner_product`` is the inner product between the keyframe
    and its first successor; it is set once and then frozen.
    """

    frame_index: int
    cloud: ColoredPointCloud
    global_pose: Pose
    timestamp: float = 0.0
    reference_inner_product: Optional[float] = None
    bow: Optional[dict] = None
    features: object = None

    def set_reference(self, value: float):
        if self.reference_inner_product is not None:
            raise TrackerStateError(f"reference inner product of keyframe {self.frame_index} is frozen")
        if not value > 0:
            raise TrackerStateError(f"reference inner product must be positive, got {value}")
        self.reference_inner_product = float(value)


@dataclass(frozen=True)
class KeyframeDecision:
    gamma: float
    translation_norm: float
    angle: float
    new_keyframe: bool


def compute_gamma(keyframe: KeyframeRecord, current_ip: float) -> float:
    """Current keyframe-to-frame inner product relative to the keyframe's reference."""
    if keyframe.reference_inner_product is None:
        raise TrackerStateError(f"keyframe {keyframe.frame_index} has no reference inner product yet")
    return current_ip / keyframe.reference_inner_product


def keyframe_decision(gamma, translation_norm, angle, cfg: FrontendConfig | None = None) -> KeyframeDecision:
    cfg = cfg or FrontendConfig()
    fire = gamma < cfg.gamma_thres or translation_norm > cfg.t_thres or angle > cfg.theta_thres
    return KeyframeDecision(float(gamma), float(translation_norm), float(angle), bool(fire))


@dataclass
class _Frame:
    index: int
    cloud: ColoredPointCloud
    rel_to_keyframe: Pose
    global_pose: Pose


@dataclass
class CompletedLocalGraph:
    graph: LocalPoseGraph
    keyframe: KeyframeRecord


@dataclass
class FrameLog:
    frame: int
    gamma: float
    t_norm: float
    theta: float
    new_keyframe: bool
    iters_consecutive: int
    iters_keyframe: int
    converged: bool

    def line(self):
        return (f"{self.frame}\t{self.gamma:.6f}\t{self.t_norm:.6f}\t{self.theta:.6f}\t"
                f"{int(self.new_keyframe)}\t{self.iters_consecutive}\t{self.iters_keyframe}\t"
                f"{int(self.converged)}")


class Tracker:
    """Frame-by-frame tracker.

    Each frame is registered against the previous frame (warm-started with
    the last reliable consecutive motion) and then against the current
    keyframe. When the keyframe decision fires at frame ``n``, frame
    ``n - 1`` becomes the next keyframe, the finished local graph is queued
    in :attr:`completed`, and frame ``n`` starts the new local graph.
    """

    def __init__(self, registration: RegistrationConfig | None = None,
                 frontend: FrontendConfig | None = None):
        self.registration = registration or RegistrationConfig()
        self.frontend = frontend or FrontendConfig()
        self.keyframes: list[KeyframeRecord] = []
        self.completed: list[CompletedLocalGraph] = []
        self.log: list[FrameLog] = []
        self.poses: dict[int, Pose] = {}
        self.timestamps: dict[int, float] = {}
        self.local: Optional[LocalPoseGraph] = None
        self._prev: Optional[_Frame] = None
        self._velocity = Pose.identity()
        self._closed = False

    @property
    def keyframe(self) -> KeyframeRecord:
        if not self.keyframes:
            raise TrackerStateError("tracker has not seen a frame yet")
        return self.keyframes[-1]

    def _start_keyframe(self, frame: _Frame, timestamp):
        record = KeyframeRecord(frame.index, frame.cloud, frame.global_pose, timestamp)
        self.keyframes.append(record)
        self.local = LocalPoseGraph(frame.index, frame.global_pose)
        return record

    def track_frame(self, cloud: ColoredPointCloud, timestamp: float | None = None):
        """Track one frame; returns ``(global pose, KeyframeDecision)``."""
        if self._closed:
            raise TrackerStateError("tracker was closed by emit_local_graph")
        if not isinstance(cloud, ColoredPointCloud):
            raise TypeError("track_frame expects a ColoredPointCloud")
        n = len(self.poses)
        t = cloud.timestamp if timestamp is None else float(timestamp)
        self.timestamps[n] = t

        if self._prev is None:
            first = _Frame(n, cloud, Pose.identity(), Pose.identity())
            self._start_keyframe(first, t)
            self._prev = first
            self.poses[n] = first.global_pose
            decision = KeyframeDecision(1.0, 0.0, 0.0, False)
            self.log.append(FrameLog(n, 1.0, 0.0, 0.0, False, 0, 0, True))
            return first.global_pose, decision

        kf = self.keyframe
        prev = self._prev
        cons = register(prev.cloud, cloud, self._velocity, self.registration)
        if prev.index == kf.frame_index:
            # first successor: the keyframe registration is this same solve
            key = cons
        else:
            key = register(kf.cloud, cloud, prev.rel_to_keyframe @ cons.pose, self.registration)
        converged = cons.converged and key.converged
        if cons.converged:
            self._velocity = cons.pose
        else:
            logger.warning("frame %d: consecutive registration did not converge; keeping motion prior", n)
        if not key.converged:
            logger.warning("frame %d: keyframe registration did not converge", n)

        if kf.reference_inner_product is None:
            kf.set_reference(key.final_inner_product)
        rel = key.pose
        decision = keyframe_decision(compute_gamma(kf, key.final_inner_product),
                                     float(np.linalg.norm(rel.translation)),
                                     se3.rotation_angle(rel), self.frontend)

        if not decision.new_keyframe:
            current = self._append(n, cloud, rel, cons.pose, kf)
        elif prev.index == kf.frame_index:
            # the previous frame already is the keyframe: keep this frame in the
            # current graph and let it seed the next one
            current = self._append(n, cloud, rel, cons.pose, kf)
            self._emit()
            self._start_keyframe(current, t)
        else:
            self._emit()
            new_kf = self._start_keyframe(_Frame(prev.index, prev.cloud, Pose.identity(), prev.global_pose),
                                          self.timestamps[prev.index])
            new_kf.set_reference(cons.final_inner_product)
            current = self._append(n, cloud, cons.pose, cons.pose, new_kf)

        self.log.append(FrameLog(n, decision.gamma, decision.translation_norm, decision.angle,
                                 decision.new_keyframe, cons.iterations,
                                 0 if key is cons else key.iterations, converged))
        return current.global_pose, decision

    def _append(self, n, cloud, rel, consecutive, kf: KeyframeRecord) -> _Frame:
        frame = _Frame(n, cloud, rel, kf.global_pose @ rel)
        first = self._prev.index == kf.frame_index
        self.local.add_frame(n, frame.global_pose, rel, None if first else consecutive,
                             default_information())
        self.poses[n] = frame.global_pose
        self._prev = frame
        return frame

    def _emit(self):
        self.completed.append(CompletedLocalGraph(self.local, self.keyframe))
        self.local = None

    def drain(self) -> list[CompletedLocalGraph]:
        """Return and forget the local graphs completed since the last call."""
        out, self.completed = self.completed, []
        return out

    def emit_local_graph(self) -> CompletedLocalGraph:
        """Close the active local graph at the end of a sequence."""
        if self.local is None:
            raise TrackerStateError("no active local graph")
        done = CompletedLocalGraph(self.local, self.keyframe)
        self.local = None
        self._closed = True
        return done

    def rebase_keyframe(self, pose: Pose):
        """Move the active keyframe to an optimized global pose.

        Frames of the active local graph keep their pose relative to the
        keyframe; later frames are chained from the new pose.
        """
        kf = self.keyframe
        correction = pose @ kf.global_pose.inverse()
        kf.global_pose = pose
        if self.local is not None:
            for node in self.local.nodes.values():
                node.pose = correction @ node.pose
                self.poses[node.id] = node.pose
        if self._prev is not None:
            self._prev.global_pose = correction @ self._prev.global_pose

    def write_log(self, path):
        with open(path, "w") as fh:
            fh.write("\t".join(LOG_HEADER) + "\n")
            for entry in self.log:
                fh.write(entry.line() + "\n")


class KeyframeTracker(BaseEstimator):
    """Estimator wrapper around :class:`Tracker` for sequences of clouds."""

    def __init__(self, t_thres=0.15, theta_thres=float(np.deg2rad(30.0)), gamma_thres=0.7,
                 registration=None):
        self.t_thres = t_thres
        self.theta_thres = theta_thres
        self.gamma_thres = gamma_thres
        self.registration = registration

    def _new_tracker(self):
        return Tracker(self.registration, FrontendConfig(self.t_thres, self.theta_thres, self.gamma_thres))

    def partial_fit(self, X: ColoredPointCloud, y=None):
        if not hasattr(self, "tracker_"):
            self.tracker_ = self._new_tracker()
        self.tracker_.track_frame(X)
        self.poses_ = [self.tracker_.poses[k] for k in sorted(self.tracker_.poses)]
        self.keyframe_indices_ = [kf.frame_index for kf in self.tracker_.keyframes]
        return self

    def fit(self, X, y=None):
        self.tracker_ = self._new_tracker()
        for cloud in X:
            self.partial_fit(cloud)
        return self

    def predict(self, X=None):
        """Global poses of all tracked frames as 4x4 matrices."""
        if not hasattr(self, "tracker_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("KeyframeTracker is not fitted yet")
        return np.stack([p.matrix() for p in self.poses_])
