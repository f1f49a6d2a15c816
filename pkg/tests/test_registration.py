import numpy as np
import pytest

from conftest import random_cloud, random_pose
from rkhs_slam import se3
from rkhs_slam.cloud import ColoredPointCloud
from rkhs_slam.registration import (
    CVORegistration,
    RegistrationConfig,
    appearance_kernel,
    geometric_kernel,
    inner_product,
    neighbor_radius,
    objective_gradient,
    register,
)
from rkhs_slam.se3 import Pose

CFG = RegistrationConfig()


def brute_force_F(a, b, h, sigma=0.1, ell=0.1, sigma_c=1.0, ell_c=0.1):
    """Unpruned double sum, written without the library's kernels."""
    moved = b.points @ h.rotation.T + h.translation
    d2 = ((a.points[:, None, :] - moved[None, :, :]) ** 2).sum(-1)
    c2 = ((a.labels[:, None, :] - b.labels[None, :, :]) ** 2).sum(-1)
    return float(np.sum(sigma_c**2 * np.exp(-c2 / (2 * ell_c**2)) * sigma**2 * np.exp(-d2 / (2 * ell**2))))


def compact_pair(seed, n=100):
    # diameter 0.26 m < pruning radius, so nothing is pruned
    rng = np.random.default_rng(seed)
    a = random_cloud(rng, n, extent=0.15)
    labels = np.clip(a.labels + rng.normal(0, 0.05, a.labels.shape), 0, 1)
    b = ColoredPointCloud(a.points + rng.normal(0, 0.01, a.points.shape), labels)
    return a, b, random_pose(rng, 2.0, 0.01)


def fd_gradient(a, b, h, eps=1e-6):
    g = np.zeros(6)
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps
        g[k] = (brute_force_F(a, b, se3.exp(d) @ h) - brute_force_F(a, b, se3.exp(-d) @ h)) / (2 * eps)
    return g


class TestKernels:
    def test_geometric_kernel_peak(self):
        x = np.array([0.3, -1.0, 2.0])
        assert geometric_kernel(x, x, 0.1, 0.1) == pytest.approx(0.01, rel=1e-15)

    def test_geometric_kernel_at_one_length_scale(self):
        val = geometric_kernel([0, 0, 0], [0.1, 0, 0], 0.1, 0.1)
        assert val == pytest.approx(0.01 * np.exp(-0.5), rel=1e-12)
        assert val == pytest.approx(6.0653e-3, abs=1e-7)

    def test_geometric_kernel_far_pairs_fall_below_threshold(self):
        assert geometric_kernel([0, 0, 0], [1.0, 0, 0], 0.1, 0.1) < CFG.sparsification_threshold

    def test_appearance_kernel(self):
        la = np.array([1.0, 0, 0, 0, 0])
        lb = np.array([0, 1.0, 0, 0, 0])
        assert appearance_kernel(la, la, 1.0, 0.1) == 1.0
        assert appearance_kernel(la, lb, 1.0, 0.1) == pytest.approx(np.exp(-100.0), rel=1e-12)
        assert appearance_kernel(la, lb, 1.0, 0.1) == appearance_kernel(lb, la, 1.0, 0.1)

    def test_neighbor_radius_bounds_pruned_kernel(self):
        r = neighbor_radius(0.1, 0.1, CFG.sparsification_threshold)
        k_at_r = geometric_kernel([0, 0, 0], [r, 0, 0], 0.1, 0.1)
        assert k_at_r <= CFG.sparsification_threshold
        assert k_at_r == pytest.approx(CFG.sparsification_threshold * 0.01, rel=1e-9)


class TestInnerProduct:
    def test_self_product_diagonal_lower_bound(self, rng):
        a = random_cloud(rng, 150)
        assert inner_product(a, a, Pose.identity(), CFG) >= 150 * 0.01 * 1.0

    def test_single_point_clouds(self):
        a = ColoredPointCloud([[0.1, 0.2, 1.0]], [[0.5] * 5])
        b = ColoredPointCloud([[0.0, 0.0, 0.0]], [[0.5] * 5])
        h = Pose(np.eye(3), [0.1, 0.2, 1.0])
        assert inner_product(a, b, h, CFG) == pytest.approx(0.01, abs=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_brute_force_within_one_percent(self, seed):
        rng = np.random.default_rng(seed)
        a = random_cloud(rng, 200)
        b = a.transformed(random_pose(rng, 3.0, 0.02))
        exact = brute_force_F(a, b, Pose.identity())
        approx = inner_product(a, b, Pose.identity(), CFG)
        assert abs(approx - exact) <= 0.01 * exact

    @pytest.mark.parametrize("seed", range(3))
    def test_pruned_mass_is_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = random_cloud(rng, 120, extent=2.0)
        b = ColoredPointCloud(rng.uniform(-1, 1, (80, 3)), np.full((80, 5), 0.5))
        a = ColoredPointCloud(a.points, np.full((120, 5), 0.5))
        pruned = brute_force_F(a, b, Pose.identity()) - inner_product(a, b, Pose.identity(), CFG)
        assert -1e-12 <= pruned <= 120 * 80 * CFG.sparsification_threshold * 1.0

    def test_symmetry(self, rng):
        a, b = random_cloud(rng, 150, extent=0.6), random_cloud(rng, 120, extent=0.6)
        assert inner_product(a, b, None, CFG) == pytest.approx(inner_product(b, a, None, CFG), abs=1e-12)

    def test_invariant_to_common_rigid_motion(self, rng):
        a, b = random_cloud(rng, 150, extent=0.6), random_cloud(rng, 120, extent=0.6)
        g = random_pose(rng, 90, 2.0)
        before = inner_product(a, b, None, CFG)
        after = inner_product(a.transformed(g), b.transformed(g), None, CFG)
        assert after == pytest.approx(before, abs=1e-9)


class TestGradient:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_central_differences(self, seed):
        a, b, h = compact_pair(seed)
        analytic = objective_gradient(a, b, h, CFG)
        numeric = fd_gradient(a, b, h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-9 * np.abs(numeric).max())

    def test_vanishes_at_symmetric_self_alignment(self):
        pts = np.array([[s1 * 0.05, s2 * 0.05, 1.0 + s3 * 0.05] for s1 in (-1, 1) for s2 in (-1, 1) for s3 in (-1, 1)])
        # symmetric about the origin so the rotational part cancels too
        pts = pts - pts.mean(axis=0)
        cloud = ColoredPointCloud(pts, np.full((8, 5), 0.3))
        assert np.linalg.norm(objective_gradient(cloud, cloud, Pose.identity(), CFG)) < 1e-8

    def test_single_pair_pulls_toward_fixed_point(self):
        d = 0.03
        a = ColoredPointCloud([[d, 0, 1.0]], [[0.2] * 5])
        b = ColoredPointCloud([[0, 0, 1.0]], [[0.2] * 5])
        g = objective_gradient(a, b, Pose.identity(), CFG)
        w = 0.01 * np.exp(-d**2 / (2 * 0.01)) / 0.01
        np.testing.assert_allclose(g[3:], [w * d, 0, 0], rtol=1e-12)


class TestRegister:
    def test_self_registration_stays_at_identity(self, rng):
        a = random_cloud(rng, 300)
        res = register(a, a, Pose.identity(), CFG)
        assert res.converged
        assert np.linalg.norm(res.pose.translation) < 0.005
        assert np.rad2deg(se3.rotation_angle(res.pose)) < 0.5

    def test_recovers_known_offset(self, rng):
        a = random_cloud(rng, 400)
        gt = se3.exp(np.concatenate([np.deg2rad(5) * np.array([0.6, 0.8, 0]), [0.05, 0, 0]]))
        b = a.transformed(gt.inverse())
        res = register(a, b, Pose.identity(), CFG)
        err = res.pose.inverse() @ gt
        assert np.rad2deg(se3.rotation_angle(err)) < 0.5
        assert np.linalg.norm(err.translation) < 0.005

    def test_ground_truth_start_converges_immediately(self, rng):
        a = random_cloud(rng, 300)
        gt = random_pose(rng, 5, 0.05)
        res = register(a, a.transformed(gt.inverse()), gt, CFG)
        assert res.converged and res.iterations == 1

    def test_never_worse_than_start_and_monotone_per_length_scale(self, rng):
        a = random_cloud(rng, 300)
        b = a.transformed(random_pose(rng, 8, 0.08))
        h0 = Pose.identity()
        res = register(a, b, h0, CFG)
        assert inner_product(a, b, res.pose, CFG) >= inner_product(a, b, h0, CFG)
        for (ell0, f0), (ell1, f1) in zip(res.history, res.history[1:]):
            if ell0 == ell1:
                assert f1 >= f0

    def test_deterministic(self, rng):
        a = random_cloud(rng, 300)
        b = a.transformed(random_pose(rng, 8, 0.08))
        r1, r2 = register(a, b, None, CFG), register(a, b, None, CFG)
        assert np.array_equal(r1.pose.matrix(), r2.pose.matrix())
        assert r1.final_inner_product == r2.final_inner_product

    def test_threaded_evaluation_is_bit_stable(self, rng):
        a = random_cloud(rng, 300)
        b = a.transformed(random_pose(rng, 8, 0.08))
        r1 = register(a, b, None, CFG.replace(n_threads=3))
        r2 = register(a, b, None, CFG.replace(n_threads=3))
        assert np.array_equal(r1.pose.matrix(), r2.pose.matrix())

    def test_rejects_non_clouds_and_empty_input(self, rng):
        a = random_cloud(rng, 10)
        with pytest.raises(TypeError):
            register(a, np.zeros((5, 3)), None, CFG)
        with pytest.raises(ValueError):
            ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 5)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RegistrationConfig(ell_min=0.5)
        with pytest.raises(ValueError):
            RegistrationConfig(ell_decay=1.5)
        with pytest.raises(ValueError):
            RegistrationConfig(sigma=-1.0)


class TestEstimator:
    def test_fit_transform_and_params(self, rng):
        a = random_cloud(rng, 300)
        gt = random_pose(rng, 5, 0.05)
        b = a.transformed(gt.inverse())
        est = CVORegistration(max_iterations=500).fit(b, a)
        assert est.get_params()["max_iterations"] == 500
        np.testing.assert_allclose(est.transform(b).points, a.points, atol=2e-3)
        assert est.score(b, a) == pytest.approx(est.inner_product_)
        assert est.converged_

    def test_unfitted_transform_raises(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            CVORegistration().transform(np.zeros((1, 3)))

    def test_clone_round_trip(self):
        from sklearn.base import clone

        est = CVORegistration(ell_init=0.2)
        assert clone(est).get_params() == est.get_params()
