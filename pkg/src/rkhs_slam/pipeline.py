"""Batch run: tracking, local and keyframe graph optimization, loop closure, export."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import decode_depth, load_sequence, select_points
from .evaluation import InsufficientOverlapError, TrajectoryEstimate, ate_rmse, rpe_rmse, write_tum
from .frontend import CompletedLocalGraph, Tracker
from .loop_closure import (
    LoopClosureCandidate,
    detect_candidates,
    eta_scores,
    extract_features,
    match_and_ransac,
    validate_and_refine,
    write_loop_closure_log,
)
from .pose_graph import LOOP_CLOSURE, PoseGraph, PoseGraphEdge, default_information, merge_local_graph, optimize, write_g2o
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)

OUTPUT_FILES = ("trajectory.txt", "keyframes.txt", "graph.g2o", "loopclosures.csv", "frontend.log", "metrics.json")


@dataclass
class RunResult:
    trajectory: TrajectoryEstimate
    keyframe_ids: list
    graph: PoseGraph
    loop_closures: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    odometry_trajectory: TrajectoryEstimate | None = None
    tracker: Tracker | None = None

    @property
    def accepted_loops(self):
        return [c for c in self.loop_closures if c.accepted]


def registration_config(cfg: RunConfig):
    """Registration settings with the ``CVO_THREADS`` environment override applied."""
    reg = cfg.registration
    threads = os.environ.get("CVO_THREADS")
    if threads:
        try:
            reg = replace(reg, n_threads=int(threads))
        except ValueError:
            raise ValueError(f"CVO_THREADS must be a positive integer, got {threads!r}") from None
    return reg


def train_vocabulary(sequence, intr, cfg: RunConfig) -> Vocabulary:
    lc = cfg.loop_closure
    descriptors = []
    for k, frame in enumerate(sequence):
        if k % lc.vocabulary_stride:
            continue
        feats = extract_features(frame.gray(), decode_depth(frame.depth, intr), intr, lc.n_features)
        descriptors.append(feats.descriptors)
    logger.info("training vocabulary from %d images", len(descriptors))
    return Vocabulary(random_state=cfg.run.seed).fit(descriptors)


class _Backend:
    """Global graph maintenance for completed local graphs."""

    def __init__(self, cfg: RunConfig, tracker: Tracker, vocabulary: Vocabulary | None):
        self.cfg = cfg
        self.tracker = tracker
        self.vocabulary = vocabulary
        self.slam = cfg.run.mode == "slam"
        self.graph = PoseGraph()
        self.features = {}
        self.bows = {}
        self.loop_closures: list[LoopClosureCandidate] = []
        self.lc_cfg = cfg.loop_closure.build()
        self.robust = cfg.pose_graph.robust()

    def remember_keyframe(self, frame_index, feats):
        self.features[frame_index] = feats
        self.bows[frame_index] = self.vocabulary.transform(feats.descriptors) if len(feats) else {}

    def process(self, done: CompletedLocalGraph, rebase=True):
        local = done.graph
        pg = self.cfg.pose_graph
        if local.edges:
            optimize(local, "local", pg.max_iter_local, pg.term_tol, fixed_ids=(local.keyframe_id,))
        added = merge_local_graph(self.graph, local)
        if self.slam:
            accepted = self._close_loops(done)
            if accepted:
                self.graph.set_robust(added + accepted, self.robust)
                optimize(self.graph, "keyframes", pg.max_iter_global, pg.term_tol)
        if rebase and self.tracker.local is not None:
            kf = self.tracker.keyframe.frame_index
            if kf in self.graph.nodes:
                self.tracker.rebase_keyframe(self.graph.nodes[kf].pose)

    def _close_loops(self, done: CompletedLocalGraph):
        i = done.keyframe.frame_index
        records = {kf.frame_index: kf for kf in self.tracker.keyframes}
        history = [k for k in sorted(self.bows) if k < i]
        if i not in self.bows:
            return []
        scores = eta_scores(self.bows[i], [self.bows[k] for k in history])
        candidates = detect_candidates(self.bows[i], [self.bows[k] for k in history], self.lc_cfg.eta_thres)
        accepted = []
        for pos in candidates:
            j = history[pos]
            eta = scores[pos]
            matches = match_and_ransac(self.features[i], self.features[j], self.lc_cfg,
                                       seed=[self.cfg.run.seed, i, j])
            if not len(matches):
                self.loop_closures.append(LoopClosureCandidate(i, j, eta, 0))
                continue
            cand = validate_and_refine(i, j, matches.pose, records[i].cloud, records[j].cloud,
                                       self.graph.nodes[i].pose, self.graph.nodes[j].pose,
                                       self.tracker.registration, eta, len(matches))
            self.loop_closures.append(cand)
            logger.info("loop candidate %d-%d: eta %.3f inliers %d alpha %.4g %s", i, j, eta, len(matches),
                        cand.alpha, "accepted" if cand.accepted else "rejected")
            if cand.accepted:
                edge = PoseGraphEdge(j, i, cand.measurement, default_information(), kind=LOOP_CLOSURE)
                accepted.append(self.graph.add_edge(edge))
        return accepted


def run_sequence(cfg: RunConfig, vocabulary: Vocabulary | None = None) -> RunResult:
    """Process the configured sequence in memory; nothing is written."""
    intr = cfg.dataset.camera()
    max_frames = cfg.run.max_frames or None
    sequence = load_sequence(cfg.dataset.path, cfg.dataset.association_tolerance, max_frames)
    if not len(sequence):
        raise ValueError(f"{cfg.dataset.path}: no associated rgb/depth frames")
    slam = cfg.run.mode == "slam"
    if slam and vocabulary is None:
        vocabulary = (Vocabulary.load(cfg.loop_closure.vocabulary) if cfg.loop_closure.vocabulary
                      else train_vocabulary(sequence, intr, cfg))

    tracker = Tracker(registration_config(cfg), cfg.frontend.build())
    backend = _Backend(cfg, tracker, vocabulary)
    recent = {}
    n_features = cfg.loop_closure.n_features
    for frame in sequence:
        cloud = select_points(frame, intr, cfg.dataset.points_per_frame)
        if slam:
            recent[frame.index] = extract_features(frame.gray(), decode_depth(frame.depth, intr), intr, n_features)
            recent = {k: v for k, v in recent.items() if k >= frame.index - 1}
        n_keyframes = len(tracker.keyframes)
        tracker.track_frame(cloud, frame.timestamp)
        if slam:
            for kf in tracker.keyframes[n_keyframes:]:
                backend.remember_keyframe(kf.frame_index, recent[kf.frame_index])
        for done in tracker.drain():
            backend.process(done)
    backend.process(tracker.emit_local_graph(), rebase=False)

    odometry = _trajectory(backend.graph, tracker.timestamps)
    if slam:
        optimize(backend.graph, "full", cfg.pose_graph.max_iter_global, cfg.pose_graph.term_tol)
    trajectory = _trajectory(backend.graph, tracker.timestamps)
    result = RunResult(trajectory, backend.graph.keyframe_ids(), backend.graph, backend.loop_closures,
                       odometry_trajectory=odometry, tracker=tracker)
    result.metrics = _metrics(result, sequence, cfg)
    return result


def _trajectory(graph: PoseGraph, timestamps) -> TrajectoryEstimate:
    ids = sorted(graph.nodes)
    return TrajectoryEstimate([timestamps[i] for i in ids], [graph.nodes[i].pose for i in ids])


def trajectory_metrics(est: TrajectoryEstimate, gt: TrajectoryEstimate, tolerance=0.02) -> dict:
    out = {}
    try:
        out["ate_rmse_m"] = ate_rmse(est, gt, tolerance)
    except InsufficientOverlapError as exc:
        logger.warning("ATE skipped: %s", exc)
    try:
        out["rpe_trans_m_per_s"], out["rpe_rot_deg_per_s"] = rpe_rmse(est, gt, 1.0, tolerance)
    except InsufficientOverlapError as exc:
        logger.warning("RPE skipped: %s", exc)
    return out


def _metrics(result: RunResult, sequence, cfg: RunConfig) -> dict:
    metrics = {
        "mode": cfg.run.mode,
        "frames": len(result.trajectory),
        "keyframes": len(result.keyframe_ids),
        "loop_candidates": len(result.loop_closures),
        "loop_closures_accepted": len(result.accepted_loops),
    }
    if sequence.groundtruth is not None:
        gt = TrajectoryEstimate(*sequence.groundtruth)
        tol = cfg.dataset.association_tolerance
        metrics.update(trajectory_metrics(result.trajectory, gt, tol))
        if cfg.run.mode == "slam":
            odo = trajectory_metrics(result.odometry_trajectory, gt, tol)
            if "ate_rmse_m" in odo:
                metrics["ate_rmse_before_final_m"] = odo["ate_rmse_m"]
    return metrics


def write_outputs(result: RunResult, output, elapsed=None):
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(result.trajectory, out / "trajectory.txt")
    kf = result.keyframe_ids
    ids = sorted(result.graph.nodes)
    stamps = dict(zip(ids, result.trajectory.timestamps))
    write_tum(TrajectoryEstimate([stamps[k] for k in kf], [result.graph.nodes[k].pose for k in kf]),
              out / "keyframes.txt")
    write_g2o(result.graph, out / "graph.g2o")
    write_loop_closure_log(result.loop_closures, out / "loopclosures.csv")
    result.tracker.write_log(out / "frontend.log")
    metrics = dict(result.metrics)
    if elapsed is not None:
        metrics["runtime_s"] = round(elapsed, 3)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return out


def run(cfg: RunConfig, vocabulary: Vocabulary | None = None) -> RunResult:
    """Process the configured sequence and write every output file."""
    start = time.perf_counter()
    result = run_sequence(cfg, vocabulary)
    write_outputs(result, cfg.run.output, time.perf_counter() - start)
    return result
