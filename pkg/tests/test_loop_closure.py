import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud, random_pose
from rkhs_slam import se3
from rkhs_slam.dataset import TUM_INTRINSICS, project
from rkhs_slam.loop_closure import (
    DegenerateGeometryError,
    FeatureSet,
    LoopClosureConfig,
    detect_candidates,
    eta_scores,
    extract_features,
    initial_pose_svd,
    l1_score,
    match_and_ransac,
    match_descriptors,
    validate_and_refine,
    write_loop_closure_log,
)
from rkhs_slam.se3 import Pose
from rkhs_slam.synthetic import SyntheticRoom

sparse_vectors = st.dictionaries(st.integers(0, 15), st.floats(0.01, 10.0), min_size=1, max_size=10)


def dense_l1(vi, vj):
    keys = sorted(vi.keys() | vj.keys())
    a = np.array([vi.get(k, 0.0) for k in keys])
    b = np.array([vj.get(k, 0.0) for k in keys])
    return 1.0 - 0.5 * np.abs(a / a.sum() - b / b.sum()).sum()


class TestScores:
    def test_examples(self):
        assert l1_score({1: 2.0}, {1: 5.0}) == 1.0
        assert l1_score({1: 1.0}, {2: 1.0}) == 0.0
        assert l1_score({0: 1.0, 1: 1.0}, {1: 1.0, 2: 1.0}) == 0.5

    @settings(max_examples=200, deadline=None)
    @given(vi=sparse_vectors, vj=sparse_vectors)
    def test_matches_dense_formula(self, vi, vj):
        s = l1_score(vi, vj)
        assert 0.0 <= s <= 1.0
        assert s == pytest.approx(dense_l1(vi, vj), abs=1e-12)
        assert s == pytest.approx(l1_score(vj, vi), abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            l1_score({}, {1: 1.0})

    def test_eta_normalizes_by_previous_keyframe(self):
        cur = {0: 1.0, 1: 1.0}
        history = [{0: 1.0}, {2: 1.0}, {0: 1.0, 1: 1.0, 2: 2.0}]
        eta = eta_scores(cur, history)
        assert sorted(eta) == [0, 1]
        assert eta[0] == pytest.approx(0.5 / 0.5)
        assert eta[1] == 0.0
        assert detect_candidates(cur, history, 0.3) == [0]

    def test_needs_two_earlier_keyframes(self):
        assert eta_scores({0: 1.0}, [{0: 1.0}]) == {}

    def test_zero_reference_gives_no_candidates(self):
        assert eta_scores({0: 1.0}, [{0: 1.0}, {5: 1.0}]) == {}


class TestInitialPose:
    def test_recovers_transform(self, rng):
        src = rng.normal(size=(30, 3))
        P = random_pose(rng, 40, 0.5)
        est = initial_pose_svd(src, P.apply(src))
        assert est.allclose(P, atol=1e-10)

    def test_collinear(self):
        pts = np.outer(np.arange(5.0), [1, 2, 3])
        with pytest.raises(DegenerateGeometryError):
            initial_pose_svd(pts, pts)

    def test_too_few(self):
        with pytest.raises(DegenerateGeometryError):
            initial_pose_svd(np.eye(3)[:2], np.eye(3)[:2])


def feature_set(points, descriptors):
    n = len(points)
    kp = np.column_stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n), np.zeros(n)])
    return FeatureSet(kp, descriptors, points[:, 2].copy(), points)


def matched_pair(seed=0, n=60, n_outliers=15):
    rng = np.random.default_rng(seed)
    cand_pts = rng.uniform([-1, -1, 1], [1, 1, 3], (n, 3))
    P = Pose(se3.exp([0.05, -0.1, 0.02, 0.1, 0.0, -0.05]).rotation, [0.1, 0.0, -0.05])
    cur_pts = P.apply(cand_pts)
    cur_pts[:n_outliers] += rng.normal(0, 0.5, (n_outliers, 3))
    cur_pts[:n_outliers, 2] = np.abs(cur_pts[:n_outliers, 2]) + 0.1
    desc = rng.integers(0, 256, (n, 32), dtype=np.uint8)
    return feature_set(cur_pts, desc), feature_set(cand_pts, desc), P


class TestRansac:
    def test_match_descriptors_identity(self):
        cur, cand, _ = matched_pair()
        pairs = match_descriptors(cur, cand, 0.7)
        assert np.array_equal(pairs[:, 0], pairs[:, 1])
        assert len(pairs) == 60

    def test_recovers_pose_and_rejects_outliers(self):
        cur, cand, P = matched_pair()
        m = match_and_ransac(cur, cand, seed=1)
        assert len(m) >= 45
        assert m.pose.allclose(P, atol=1e-8)
        assert m.n_putative == 60

    def test_seeded(self):
        cur, cand, _ = matched_pair(n_outliers=25)
        cfg = LoopClosureConfig(ransac_iterations=5, early_exit_ratio=1.0)
        a = match_and_ransac(cur, cand, cfg, seed=7)
        b = match_and_ransac(cur, cand, cfg, seed=7)
        assert np.array_equal(a.source, b.source)

    def test_too_few_matches(self):
        cur, cand, _ = matched_pair(n=4, n_outliers=0)
        assert len(match_and_ransac(cur, cand)) == 0

    def test_empty_sets(self):
        assert len(match_and_ransac(FeatureSet.empty(), FeatureSet.empty())) == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LoopClosureConfig(ratio=1.5)
        with pytest.raises(ValueError):
            LoopClosureConfig(min_matches=2)


class TestValidation:
    def test_identical_keyframes_are_rejected(self, rng):
        c = random_cloud(rng, 200)
        cand = validate_and_refine(5, 1, Pose.identity(), c, c, Pose.identity(), Pose.identity())
        assert cand.alpha == 0.0
        assert not cand.accepted

    def test_refinement_beats_references(self, rng):
        ci = random_cloud(rng, 300)
        truth = se3.exp([0.0, 0.05, 0.0, 0.04, 0.0, 0.02])
        cj = ci.transformed(truth.inverse())
        initial = se3.exp([0.01, 0.0, 0.0, 0.0, 0.01, 0.0]) @ truth
        far = Pose(np.eye(3), [3.0, 0, 0])
        cand = validate_and_refine(9, 2, initial, ci, cj, Pose.identity(), far, eta=0.5, n_inliers=12)
        assert cand.accepted and cand.alpha > 0
        assert cand.refined_pose.allclose(truth, atol=2e-3)
        assert cand.measurement.allclose(truth.inverse(), atol=2e-3)

    def test_log(self, tmp_path, rng):
        c = random_cloud(rng, 50)
        cand = validate_and_refine(5, 1, Pose.identity(), c, c, Pose.identity(), Pose.identity(), eta=0.4)
        path = tmp_path / "loops.csv"
        write_loop_closure_log([cand], path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["i", "j", "eta", "n_inliers", "alpha", "accepted"]
        assert rows[1][:2] == ["5", "1"] and rows[1][-1] == "0"


def test_extract_features_back_projects_through_depth():
    intr = TUM_INTRINSICS["fr1"]
    rgb, depth = SyntheticRoom(0).render(Pose.identity(), intr)
    feats = extract_features(rgb, depth, intr, 300)
    assert 50 < len(feats) <= 300
    assert np.all(feats.depths > 0)
    u, v = project(feats.points, intr)
    assert np.allclose(u, feats.keypoints[:, 0], atol=1e-9) and np.allclose(v, feats.keypoints[:, 1], atol=1e-9)
    col, row = np.rint(feats.keypoints[:, :2]).astype(int).T
    assert np.array_equal(feats.depths, depth[row, col])
