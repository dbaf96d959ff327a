"""Adaptive-weighted matching loss and explicit pose loss with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import EmptySetError
from .geometry import CameraIntrinsics, Pose, apply_pose, project


@dataclass(frozen=True)
class AWLossParams:
    margin: float = 0.25
    gamma: float = 32.0
    safe_radius: float = 1.0

    def __post_init__(self):
        if self.margin < 0 or not self.gamma > 0 or not self.safe_radius > 0:
            raise ValueError("need margin >= 0, gamma > 0 and safe_radius > 0")


@dataclass(frozen=True)
class PairPartition:
    """Index lists of positive / negative pairs and their similarities."""

    positive: np.ndarray
    negative: np.ndarray
    s_p: np.ndarray
    s_n: np.ndarray


def partition_pairs(
    pixels: np.ndarray,
    points: np.ndarray,
    pose_gt: Pose,
    intrinsics: CameraIntrinsics,
    r: float = 1.0,
    similarities: np.ndarray | None = None,
) -> PairPartition:
    """Split pairs by whether the pixel lies within ``r`` of the point's true projection."""
    if not r > 0:
        raise ValueError("safe radius must be positive")
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    uv, valid = project(intrinsics, apply_pose(pose_gt, points))
    dist = np.linalg.norm(uv - pixels, axis=1)
    with np.errstate(invalid="ignore"):
        pos = valid & (dist <= r)
    s = np.zeros(pixels.shape[0]) if similarities is None else np.asarray(similarities, dtype=np.float64)
    return PairPartition(np.flatnonzero(pos), np.flatnonzero(~pos), s[pos], s[~pos])


def aw_weights(s_p: np.ndarray, s_n: np.ndarray, params: AWLossParams = AWLossParams()):
    """Self-paced weights, clamped at zero; treated as constants when differentiating."""
    rho_p = np.maximum(0.0, params.gamma * (1.0 - s_p + params.margin))
    rho_n = np.maximum(0.0, params.gamma * (s_n - params.margin))
    return rho_p, rho_n


def aw_loss_terms(
    s_p,
    s_n,
    params: AWLossParams = AWLossParams(),
    rho_p: np.ndarray | None = None,
    rho_n: np.ndarray | None = None,
):
    """Loss value and gradients wrt ``s_p`` and ``s_n``.

    ``rho_p`` / ``rho_n`` default to :func:`aw_weights`; passing them
    explicitly evaluates the loss with frozen weights, which is the function
    whose derivative the returned gradients are.
    """
    s_p = np.asarray(s_p, dtype=np.float64).reshape(-1)
    s_n = np.asarray(s_n, dtype=np.float64).reshape(-1)
    if s_p.size == 0 and s_n.size == 0:
        raise EmptySetError("adaptive-weighted loss needs at least one pair")
    if s_p.size == 0 or s_n.size == 0:
        return 0.0, np.zeros_like(s_p), np.zeros_like(s_n)
    auto_p, auto_n = aw_weights(s_p, s_n, params)
    rho_p = auto_p if rho_p is None else np.asarray(rho_p, dtype=np.float64)
    rho_n = auto_n if rho_n is None else np.asarray(rho_n, dtype=np.float64)
    a = rho_p * (1.0 - s_p + params.margin)
    b = rho_n * (s_n - params.margin)
    z = logsumexp(a) + logsumexp(b)
    loss = float(np.logaddexp(0.0, z))
    dz = expit(z)
    grad_p = -dz * softmax(a) * rho_p
    grad_n = dz * softmax(b) * rho_n
    return loss, grad_p, grad_n


def adaptive_weighted_loss(partition: PairPartition, params: AWLossParams = AWLossParams()):
    """Returns ``(loss, grad_s_p, grad_s_n)`` for a positive/negative partition."""
    return aw_loss_terms(partition.s_p, partition.s_n, params)


def pose_loss(pose_pred: Pose, pose_gt: Pose) -> float:
    """``2 - 2 <q_pred, q_gt>^2 + ||t_pred - t_gt||^2``."""
    dot = float(pose_pred.quaternion() @ pose_gt.quaternion())
    dt = pose_pred.translation - pose_gt.translation
    return 2.0 - 2.0 * dot * dot + float(dt @ dt)


def pose_loss_grad(pose_pred: Pose, pose_gt: Pose) -> np.ndarray:
    """Gradient wrt a left increment ``[omega, v]`` applied to ``pose_pred``."""
    # rotation term equals (3 - trace(R_pred^T R_gt)) / 2
    M = pose_gt.rotation @ pose_pred.rotation.T
    g_rot = 0.5 * np.array([M[1, 2] - M[2, 1], M[2, 0] - M[0, 2], M[0, 1] - M[1, 0]])
    dt = 2.0 * (pose_pred.translation - pose_gt.translation)
    g_rot = g_rot + np.cross(pose_pred.translation, dt)
    return np.concatenate([g_rot, dt])
