from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vp2p.errors import EmptySetError
from vp2p.geometry import CameraIntrinsics, Pose, apply_pose, matrix_to_quaternion, project, rotation_error_deg, se3_retract, so3_exp
from vp2p.losses import (
    AWLossParams,
    PairPartition,
    adaptive_weighted_loss,
    aw_loss_terms,
    aw_weights,
    partition_pairs,
    pose_loss,
    pose_loss_grad,
)

INTR = CameraIntrinsics(100.0, 100.0, 50.0, 40.0, 100, 80)
sims = st.floats(-1.0, 1.0)


def aw_oracle(s_p, s_n, m=0.25, gamma=32.0):
    """Direct evaluation of the closed form with plain Python loops."""
    sp = sum(math.exp(max(0.0, gamma * (1 - s + m)) * (1 - s + m)) for s in s_p)
    sn = sum(math.exp(max(0.0, gamma * (s - m)) * (s - m)) for s in s_n)
    return math.log1p(sp * sn)


class TestPartition:
    def test_examples(self):
        pose = Pose.identity()
        pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0], [0.0, 0.0, -5.0]])
        pix = np.array([[50.0, 40.0], [55.0, 40.0], [50.0, 40.0]])
        part = partition_pairs(pix, pts, pose, INTR, r=1.0, similarities=np.array([0.9, 0.1, 0.2]))
        assert part.positive.tolist() == [0]
        assert part.negative.tolist() == [1, 2]
        assert part.s_p.tolist() == [0.9] and part.s_n.tolist() == [0.1, 0.2]

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        pose = Pose(so3_exp(rng.normal(0, 0.1, 3)), np.array([0.0, 0.0, 1.0]))
        pts = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200), rng.uniform(2, 6, 200)])
        uv, valid = project(INTR, apply_pose(pose, pts))
        pix = np.where(valid[:, None], uv, 0.0) + rng.uniform(-2, 2, (200, 2))
        part = partition_pairs(pix, pts, pose, INTR, r=1.5)
        expected = [i for i in range(200) if valid[i] and math.hypot(*(pix[i] - uv[i])) <= 1.5]
        assert part.positive.tolist() == expected
        assert sorted(part.positive.tolist() + part.negative.tolist()) == list(range(200))

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            partition_pairs(np.zeros((1, 2)), np.ones((1, 3)), Pose.identity(), INTR, r=0.0)


class TestAWLoss:
    def test_hand_example(self):
        loss, _, _ = aw_loss_terms([1.0], [-1.0])
        assert loss == pytest.approx(math.log(1 + math.e**2), abs=1e-12)
        assert loss == pytest.approx(2.1269, abs=1e-4)

    def test_empty_sets(self):
        assert aw_loss_terms([0.3, 0.5], [])[0] == 0.0
        assert aw_loss_terms([], [0.3])[0] == 0.0
        with pytest.raises(EmptySetError):
            aw_loss_terms([], [])

    def test_partition_wrapper(self):
        part = PairPartition(np.array([0]), np.array([1]), np.array([1.0]), np.array([-1.0]))
        assert adaptive_weighted_loss(part)[0] == aw_loss_terms([1.0], [-1.0])[0]

    def test_param_validation(self):
        with pytest.raises(ValueError):
            AWLossParams(margin=-0.1)
        with pytest.raises(ValueError):
            AWLossParams(gamma=0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(sims, min_size=1, max_size=8), st.lists(sims, min_size=1, max_size=8))
    def test_matches_oracle_and_nonnegative(self, s_p, s_n):
        loss = aw_loss_terms(s_p, s_n)[0]
        assert loss >= 0.0
        assert loss == pytest.approx(aw_oracle(s_p, s_n), rel=1e-10, abs=1e-12)

    def test_stable_for_extreme_similarities(self):
        loss, gp, gn = aw_loss_terms(np.full(5, -1.0), np.full(5, 1.0))
        assert np.isfinite(loss) and np.all(np.isfinite(gp)) and np.all(np.isfinite(gn))

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(1)
        h = 1e-5
        for _ in range(200):
            s_p = rng.uniform(-1, 1, rng.integers(1, 10))
            s_n = rng.uniform(-1, 1, rng.integers(1, 10))
            rho_p, rho_n = aw_weights(s_p, s_n)
            _, gp, gn = aw_loss_terms(s_p, s_n)
            x = np.concatenate([s_p, s_n])
            k = s_p.size
            fd = np.array(
                [
                    (aw_loss_terms((x + h * e)[:k], (x + h * e)[k:], rho_p=rho_p, rho_n=rho_n)[0]
                     - aw_loss_terms((x - h * e)[:k], (x - h * e)[k:], rho_p=rho_p, rho_n=rho_n)[0]) / (2 * h)
                    for e in np.eye(x.size)
                ]
            )
            g = np.concatenate([gp, gn])
            assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-6

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, 4, elements=sims),
        arrays(np.float64, 4, elements=sims),
        st.integers(0, 3),
        st.floats(1e-3, 0.5),
    )
    def test_monotonicity(self, s_p, s_n, i, step):
        base = aw_loss_terms(s_p, s_n)[0]
        up_n = s_n.copy()
        up_n[i] = min(1.0, up_n[i] + step)
        up_p = s_p.copy()
        up_p[i] = min(1.0, up_p[i] + step)
        assert aw_loss_terms(s_p, up_n)[0] >= base
        assert aw_loss_terms(up_p, s_n)[0] <= base

    def test_hard_negatives_get_larger_gradients(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            hi, lo = np.sort(rng.uniform(0.25, 1.0, 2))[::-1]
            if hi == lo:
                continue
            s_n = np.concatenate([[hi, lo], rng.uniform(-1, 1, 3)])
            _, _, gn = aw_loss_terms(rng.uniform(-1, 1, 3), s_n)
            assert abs(gn[0]) > abs(gn[1])

    def test_easy_negative_weight_clamped(self):
        rho_p, rho_n = aw_weights(np.array([0.5]), np.array([-0.5, 0.25]))
        assert rho_n.tolist() == [0.0, 0.0]
        assert rho_p[0] == pytest.approx(32 * 0.75)


class TestPoseLoss:
    def test_zero_and_half_turn(self):
        rng = np.random.default_rng(3)
        p = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        assert pose_loss(p, p) == pytest.approx(0.0, abs=1e-12)
        flip = Pose(so3_exp(np.array([0.0, 0.0, math.pi])) @ p.rotation, p.translation)
        assert pose_loss(flip, p) == pytest.approx(2.0, abs=1e-12)

    def test_geodesic_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
            b = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
            theta = math.radians(rotation_error_deg(a.rotation, b.rotation))
            expected = 2.0 * (1.0 - math.cos(theta / 2) ** 2) + float(np.sum((a.translation - b.translation) ** 2))
            assert pose_loss(a, b) == pytest.approx(expected, abs=1e-10)

    def test_sign_invariance_and_symmetry(self):
        rng = np.random.default_rng(5)
        a = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        b = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        qa, qb = matrix_to_quaternion(a.rotation), matrix_to_quaternion(b.rotation)
        assert (qa @ qb) ** 2 == pytest.approx((-qa @ qb) ** 2)
        assert pose_loss(a, b) == pytest.approx(pose_loss(b, a), abs=1e-12)
        assert 0.0 <= pose_loss(a, Pose(b.rotation, a.translation)) <= 2.0

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(6)
        h = 1e-6
        for _ in range(50):
            a = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
            b = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
            fd = np.array([(pose_loss(se3_retract(a, h * e), b) - pose_loss(se3_retract(a, -h * e), b)) / (2 * h) for e in np.eye(6)])
            assert np.max(np.abs(pose_loss_grad(a, b) - fd)) < 1e-6 * max(1.0, np.max(np.abs(fd)))
