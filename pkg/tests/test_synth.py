from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from vp2p.errors import InsufficientDataError
from vp2p.geometry import Pose, apply_pose, project, registration_error, so3_log
from vp2p.matching import detect_intersection, match_features
from vp2p.pipeline import RunConfig, register_synthetic
from vp2p.pnp import reprojection_cost, residuals
from vp2p.synth import (
    SceneConfig,
    generate_scene,
    make_correspondences,
    matching_accuracy,
    sample_misregistration,
    synthesize_features,
)


def matched(cfg):
    scene = generate_scene(cfg)
    feats, scores, owner = synthesize_features(scene, cfg)
    m2, m3 = detect_intersection(scores)
    return match_features(feats.f2d, feats.f3d, feats.pixel_coords, scene.cloud, m2, m3), owner, feats


class TestMisregistration:
    def test_deterministic(self):
        a = sample_misregistration(np.random.default_rng(5))
        b = sample_misregistration(np.random.default_rng(5))
        assert a.to_list() == b.to_list()

    def test_distribution(self):
        rng = np.random.default_rng(0)
        draws = [sample_misregistration(rng) for _ in range(10_000)]
        t = np.array([p.translation for p in draws])
        assert np.all(np.abs(t[:, :2]) <= 10.0) and np.all(t[:, 2] == 0.0)
        yaw = np.array([math.atan2(p.rotation[1, 0], p.rotation[0, 0]) % (2 * math.pi) for p in draws])
        assert stats.kstest(yaw / (2 * math.pi), "uniform").pvalue > 0.01
        assert stats.kstest((t[:, 0] + 10) / 20, "uniform").pvalue > 0.01

    def test_pure_yaw(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            R = sample_misregistration(rng).rotation
            assert np.max(np.abs(R[2] - [0, 0, 1])) < 1e-12 and np.max(np.abs(R[:, 2] - [0, 0, 1])) < 1e-12
            w = so3_log(R)
            assert np.linalg.norm(w[:2]) < 1e-12


class TestScene:
    def test_bit_identical(self):
        a, b = generate_scene(SceneConfig(seed=3)), generate_scene(SceneConfig(seed=3))
        assert a.cloud.tobytes() == b.cloud.tobytes()
        assert a.pose_gt.to_list() == b.pose_gt.to_list()
        assert np.array_equal(a.gt_inlier_mask, b.gt_inlier_mask)
        assert a.cloud.tobytes() != generate_scene(SceneConfig(seed=4)).cloud.tobytes()

    def test_mask_is_projection_validity(self):
        s = generate_scene(SceneConfig(seed=2))
        uv, valid = project(s.intrinsics, apply_pose(s.pose_gt, s.cloud))
        assert np.array_equal(valid, s.gt_inlier_mask)
        assert np.array_equal(uv[valid], s.gt_pixel[valid])

    def test_inlier_fraction_strictly_between(self):
        for seed in range(100):
            frac = generate_scene(SceneConfig(seed=seed)).gt_inlier_mask.mean()
            assert 0.0 < frac < 1.0

    def test_gt_pixels_strictly_inside(self):
        for seed in range(20):
            s = generate_scene(SceneConfig(seed=seed))
            uv = s.gt_pixel[s.gt_inlier_mask]
            assert np.all(uv > 0) and np.all(uv[:, 0] < s.intrinsics.width) and np.all(uv[:, 1] < s.intrinsics.height)

    def test_identity_misregistration(self):
        s = generate_scene(SceneConfig(seed=1, misregister=False))
        assert s.misregistration.to_list() == Pose.identity().to_list()
        assert s.pose_gt.to_list() == SceneConfig().mount.to_list()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(n_points=7)
        with pytest.raises(ValueError):
            SceneConfig(outlier_fraction=1.5)


class TestCorrespondences:
    def test_noiseless_zero_cost(self):
        cfg = SceneConfig(seed=0)
        s = generate_scene(cfg)
        assert reprojection_cost(s.pose_gt, make_correspondences(s, cfg), s.intrinsics) < 1e-18

    def test_exact_outlier_count(self):
        cfg = SceneConfig(seed=0, outlier_fraction=0.3)
        s = generate_scene(cfg)
        keep = np.flatnonzero(s.gt_inlier_mask)[:100]
        mask = np.zeros_like(s.gt_inlier_mask)
        mask[keep] = True
        small = type(s)(s.cloud, s.intrinsics, s.pose_gt, s.gt_pixel, mask, s.misregistration)
        c = make_correspondences(small, cfg)
        assert len(c) == 100 and int(c.outlier.sum()) == 30

    def test_chi_square_residual(self):
        sq = []
        seed = 0
        while sum(map(len, sq)) < 10_000:
            cfg = SceneConfig(seed=seed, pixel_noise_sigma=0.5)
            s = generate_scene(cfg)
            c = make_correspondences(s, cfg)
            r = residuals(s.pose_gt, c.pixels, c.points, s.intrinsics)[0]
            sq.append(np.sum(r**2, axis=1))
            seed += 1
        assert np.mean(np.concatenate(sq)) == pytest.approx(0.5, rel=0.1)

    def test_too_few_visible(self):
        cfg = SceneConfig(seed=0)
        s = generate_scene(cfg)
        mask = np.zeros_like(s.gt_inlier_mask)
        mask[np.flatnonzero(s.gt_inlier_mask)[:5]] = True
        with pytest.raises(InsufficientDataError):
            make_correspondences(type(s)(s.cloud, s.intrinsics, s.pose_gt, s.gt_pixel, mask, s.misregistration), cfg)


class TestFeatures:
    def test_unit_norm(self):
        _, _, f = matched(SceneConfig(seed=0, feature_noise_sigma=0.4))
        assert np.max(np.abs(np.linalg.norm(f.f2d, axis=1) - 1)) < 1e-6
        assert np.max(np.abs(np.linalg.norm(f.f3d, axis=1) - 1)) < 1e-6

    def test_noiseless_pairing_exact(self):
        for seed in range(3):
            c, owner, _ = matched(SceneConfig(seed=seed))
            assert matching_accuracy(c, owner) == 1.0

    def test_noise_sweep_non_increasing(self):
        acc = []
        for sigma in (0.0, 0.3, 0.6, 1.0):
            acc.append(np.mean([matching_accuracy(*matched(SceneConfig(seed=s, feature_noise_sigma=sigma))[:2]) for s in range(3)]))
        assert acc[0] == 1.0
        assert all(a >= b for a, b in zip(acc, acc[1:]))

    def test_deterministic(self):
        a = matched(SceneConfig(seed=9, feature_noise_sigma=0.2))[2]
        b = matched(SceneConfig(seed=9, feature_noise_sigma=0.2))[2]
        assert a.f2d.tobytes() == b.f2d.tobytes() and a.f3d.tobytes() == b.f3d.tobytes()


def test_noiseless_pipeline_recovers_pose():
    for seed in range(3):
        res = register_synthetic(RunConfig().with_seed(seed))
        assert res.error.rte < 1e-4 and res.error.rre < 1e-4
