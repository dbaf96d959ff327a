"""Pose posterior, adaptive multiple importance sampling and the KL loss.

The posterior ``p(T | X) ~ exp(-cost(T))`` is integrated in a product chart
around a center pose ``(R_c, t_c)``::

    phi = [omega, v]  ->  R = Exp(omega) R_c,  t = t_c + v

with Lebesgue measure ``d phi``. Translations enter additively, so the chart
measure coincides with ``dR dt`` up to the SO(3) exponential-coordinate
Jacobian, which is 1 to second order and exactly 1 when only one rotation
axis is free. A ``dofs`` subset of the six coordinates restricts the problem
(the remaining coordinates stay pinned at the center).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import SamplerDegenerateError
from .geometry import Z_MIN, CameraIntrinsics, Pose
from .matching import CorrespondenceSet
from .pnp import (
    RESIDUAL_CAP,
    PnPConfig,
    epnp_solve,
    gn_refine,
    projection_jacobian,
    reprojection_cost,
)

ALL_DOFS = (0, 1, 2, 3, 4, 5)


@dataclass(frozen=True)
class AMISConfig:
    rounds: int = 4
    samples_per_round: int = 128
    # fallback proposal when the Laplace approximation is unavailable
    init_rot_std: float = 0.05
    init_trans_std: float = 0.5
    laplace_inflation: float = 2.0
    cov_regularization: float = 1e-8

    def __post_init__(self):
        if self.rounds < 1 or self.samples_per_round < 2:
            raise ValueError("need at least one round and two samples per round")


@dataclass
class PosePosteriorSamples:
    samples: list[Pose]
    log_weights: np.ndarray
    log_normalizer_estimate: float
    center: Pose | None = None
    dofs: tuple[int, ...] = ALL_DOFS
    coords: np.ndarray | None = None
    log_density: np.ndarray | None = None
    proposals: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    center_log_density: float = -np.inf

    def normalized_weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - logsumexp(self.log_weights))
        return w / w.sum()

    def effective_sample_size(self) -> float:
        w = self.normalized_weights()
        return float(1.0 / np.sum(w * w))

    def map_sample(self) -> Pose:
        """Highest-density pose seen by the sampler: the best draw, or the
        posterior mode the proposals were centered on if that is higher."""
        best = int(np.argmax(self.log_density))
        if self.center is not None and self.center_log_density >= self.log_density[best]:
            return self.center
        return self.samples[best]


def _batch_so3_exp(omega: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("si,si->s", omega, omega)
    theta = np.sqrt(theta2)
    small = theta2 < 1e-12
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(ts)) / np.where(small, 1.0, theta2))
    K = np.zeros((omega.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -omega[:, 2], omega[:, 1]
    K[:, 1, 0], K[:, 1, 2] = omega[:, 2], -omega[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -omega[:, 1], omega[:, 0]
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def _full_coords(phi: np.ndarray, dofs) -> np.ndarray:
    full = np.zeros((phi.shape[0], 6))
    full[:, list(dofs)] = phi
    return full


def chart_poses(center: Pose, phi: np.ndarray, dofs=ALL_DOFS):
    """Rotations ``(S, 3, 3)`` and translations ``(S, 3)`` for chart coordinates."""
    full = _full_coords(np.atleast_2d(phi), dofs)
    R = _batch_so3_exp(full[:, :3]) @ center.rotation
    t = center.translation + full[:, 3:]
    return R, t


def _batch_residuals(R, t, corrs: CorrespondenceSet, intrinsics: CameraIntrinsics):
    X = np.einsum("sij,mj->smi", R, corrs.points) + t[:, None, :]
    z = X[..., 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    r = np.empty(X.shape[:2] + (2,))
    r[..., 0] = intrinsics.fx * X[..., 0] / zs + intrinsics.cx - corrs.pixels[:, 0]
    r[..., 1] = intrinsics.fy * X[..., 1] / zs + intrinsics.cy - corrs.pixels[:, 1]
    r[~front] = RESIDUAL_CAP
    return r, X, front


def log_posterior_unnormalized(R, t, corrs: CorrespondenceSet, intrinsics: CameraIntrinsics) -> np.ndarray:
    """``-1/2 sum_i ||w_i(T)||^2`` for a batch of poses."""
    r, _, _ = _batch_residuals(np.atleast_3d(R).reshape(-1, 3, 3), np.reshape(t, (-1, 3)), corrs, intrinsics)
    return -0.5 * np.einsum("smk,smk->s", r, r)


def _chart_jacobian(center: Pose, corrs: CorrespondenceSet, intrinsics: CameraIntrinsics, dofs):
    RP = corrs.points @ center.rotation.T
    X = RP + center.translation
    front = X[:, 2] > Z_MIN
    Jp = projection_jacobian(X, front, intrinsics)
    dX = np.zeros((X.shape[0], 3, 6))
    # rotation acts on R_c P only; translation is additive
    dX[:, 0, 1], dX[:, 0, 2] = RP[:, 2], -RP[:, 1]
    dX[:, 1, 0], dX[:, 1, 2] = -RP[:, 2], RP[:, 0]
    dX[:, 2, 0], dX[:, 2, 1] = RP[:, 1], -RP[:, 0]
    dX[:, :, 3:] = np.eye(3)
    J = (Jp @ dX)[:, :, list(dofs)]
    r = np.empty((X.shape[0], 2))
    zs = np.where(front, X[:, 2], 1.0)
    r[:, 0] = intrinsics.fx * X[:, 0] / zs + intrinsics.cx - corrs.pixels[:, 0]
    r[:, 1] = intrinsics.fy * X[:, 1] / zs + intrinsics.cy - corrs.pixels[:, 1]
    r[~front] = RESIDUAL_CAP
    return J.reshape(-1, len(dofs)), r.reshape(-1)


def laplace_approximation(
    corrs: CorrespondenceSet, intrinsics: CameraIntrinsics, init: Pose, dofs=ALL_DOFS, iters: int = 30
):
    """Mode of the posterior restricted to ``dofs`` and its Gauss-Newton covariance.

    Returns ``(mode, cov)``; ``cov`` is ``None`` when the Hessian is singular.
    """
    center = init
    cost = reprojection_cost(center, corrs, intrinsics)
    lam = 1e-6
    for _ in range(iters):
        J, r = _chart_jacobian(center, corrs, intrinsics, dofs)
        H = J.T @ J
        g = J.T @ r
        d = np.maximum(np.diag(H), 1e-300)
        while lam < 1e12:
            try:
                step = np.linalg.solve(H + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R, t = chart_poses(center, step[None, :], dofs)
            cand = Pose(R[0], t[0])
            new_cost = reprojection_cost(cand, corrs, intrinsics)
            if new_cost <= cost:
                break
            lam *= 10.0
        else:
            break
        decrease = cost - new_cost
        center, cost = cand, new_cost
        lam = max(lam / 10.0, 1e-12)
        if decrease <= 1e-12 * max(cost, 1.0):
            break
    J, _ = _chart_jacobian(center, corrs, intrinsics, dofs)
    H = J.T @ J
    try:
        np.linalg.cholesky(H)
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = None
    return center, cov


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    z = np.linalg.solve(chol, (x - mean).T)
    return -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * d * np.log(2.0 * np.pi)


def amis_sample_posterior(
    corrs: CorrespondenceSet,
    intrinsics: CameraIntrinsics,
    config: PnPConfig = PnPConfig(),
    rng: np.random.Generator | None = None,
    amis: AMISConfig = AMISConfig(),
    init: Pose | None = None,
    dofs=ALL_DOFS,
) -> PosePosteriorSamples:
    """Adaptive multiple importance sampling of the pose posterior.

    Every round draws from a Gaussian proposal in chart coordinates, then all
    samples so far are reweighted against the equally-weighted (balance
    heuristic) mixture of every proposal used, and the next proposal is the
    weighted mean / covariance of that pool.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    dofs = tuple(int(k) for k in dofs)
    if init is None:
        init = gn_refine(corrs, intrinsics, epnp_solve(corrs, intrinsics), config).pose
    center, cov = laplace_approximation(corrs, intrinsics, init, dofs)
    d = len(dofs)
    if cov is None:
        std = np.array([amis.init_rot_std] * 3 + [amis.init_trans_std] * 3)[list(dofs)]
        cov = np.diag(std**2)
    else:
        cov = amis.laplace_inflation * cov
    mean = np.zeros(d)

    proposals: list[tuple[np.ndarray, np.ndarray]] = []
    xs = np.empty((0, d))
    logp = np.empty(0)
    log_w = np.empty(0)
    for round_ in range(amis.rounds):
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise SamplerDegenerateError("proposal covariance is not positive definite") from exc
        proposals.append((mean, chol))
        x = mean + rng.standard_normal((amis.samples_per_round, d)) @ chol.T
        R, t = chart_poses(center, x, dofs)
        xs = np.vstack([xs, x])
        logp = np.concatenate([logp, log_posterior_unnormalized(R, t, corrs, intrinsics)])
        log_q = logsumexp(np.stack([_mvn_logpdf(xs, m, L) for m, L in proposals]), axis=0) - np.log(len(proposals))
        log_w = logp - log_q
        if not np.all(np.isfinite(log_w)):
            raise SamplerDegenerateError("non-finite importance weights")
        if round_ == amis.rounds - 1:
            break
        w = np.exp(log_w - logsumexp(log_w))
        if 1.0 / np.sum(w * w) < 2 * d:
            continue  # too few effective samples to refit; keep the proposal
        mean = w @ xs
        diff = xs - mean
        cov = (w[:, None] * diff).T @ diff
        cov = cov + amis.cov_regularization * np.diag(np.diag(cov))

    R, t = chart_poses(center, xs, dofs)
    samples = [Pose(Ri, ti) for Ri, ti in zip(R, t)]
    log_z = float(logsumexp(log_w) - np.log(log_w.size))
    center_logp = float(log_posterior_unnormalized(center.rotation, center.translation, corrs, intrinsics)[0])
    return PosePosteriorSamples(samples, log_w, log_z, center, dofs, xs, logp, proposals, center_logp)


def kl_loss(
    corrs: CorrespondenceSet, intrinsics: CameraIntrinsics, pose_gt: Pose, samples: PosePosteriorSamples
) -> float:
    """Reprojection cost at the ground truth plus the log-normalizer estimate."""
    return reprojection_cost(pose_gt, corrs, intrinsics) + samples.log_normalizer_estimate


def _batch_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("si,si->s", omega, omega)
    small = theta2 < 1e-12
    th2 = np.where(small, 1.0, theta2)
    th = np.sqrt(th2)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(th)) / th2)
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (th - np.sin(th)) / (th2 * th))
    K = np.zeros((omega.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -omega[:, 2], omega[:, 1]
    K[:, 1, 0], K[:, 1, 2] = omega[:, 2], -omega[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -omega[:, 1], omega[:, 0]
    return np.eye(3) + b[:, None, None] * K + c[:, None, None] * (K @ K)


def _cost_grads(R, t, corrs: CorrespondenceSet, intrinsics: CameraIntrinsics):
    """Per-pose ``d cost / d P_i`` ``(S, M, 3)``, camera-frame point gradients and
    the left-perturbation rotation / translation gradients ``(S, 3)`` each."""
    r, X, front = _batch_residuals(R, t, corrs, intrinsics)
    S, M = front.shape
    Jp = projection_jacobian(X.reshape(-1, 3), front.reshape(-1), intrinsics).reshape(S, M, 2, 3)
    gX = np.einsum("smk,smkj->smj", r, Jp)  # J_pi^T r
    g_points = np.einsum("smj,sji->smi", gX, R)  # (J_pi R)^T r
    g_rot = np.cross(X - t[:, None, :], gX).sum(axis=1)
    g_trans = gX.sum(axis=1)
    return g_points, g_rot, g_trans


def _cost_grad_points(R, t, corrs: CorrespondenceSet, intrinsics: CameraIntrinsics) -> np.ndarray:
    """d cost / d P_i for a batch of poses, shape ``(S, M, 3)``."""
    return _cost_grads(R, t, corrs, intrinsics)[0]


def _posterior_mean_grad_points(samples: PosePosteriorSamples, corrs, intrinsics) -> np.ndarray:
    """Self-normalized estimate of ``E_posterior[d cost / d P]``.

    Integration by parts against ``exp(-cost) d phi`` gives two families of
    functions with known posterior means: ``grad_phi cost`` (mean 0) and
    ``phi_i d cost / d phi_j`` (mean ``delta_ij``). They are used as control
    variates: the part of ``d cost / d P`` they explain is regressed out under
    the importance weights, which removes most of the Monte Carlo noise.
    """
    R = np.stack([p.rotation for p in samples.samples])
    t = np.stack([p.translation for p in samples.samples])
    w = samples.normalized_weights()
    g_points, g_rot, g_trans = _cost_grads(R, t, corrs, intrinsics)
    Y = g_points.reshape(len(w), -1)
    y_mean = w @ Y
    if samples.coords is None or samples.coords.shape[1] == 0:
        return y_mean.reshape(-1, 3)
    d = samples.coords.shape[1]
    full = _full_coords(samples.coords, samples.dofs)
    g_omega = np.einsum("sji,sj->si", _batch_left_jacobian(full[:, :3]), g_rot)
    score = np.concatenate([g_omega, g_trans], axis=1)[:, list(samples.dofs)]
    second = np.einsum("si,sj->sij", samples.coords, score).reshape(len(w), -1) - np.eye(d).reshape(-1)
    ess = 1.0 / np.sum(w * w)
    for H in (np.concatenate([score, second], axis=1), score):
        if ess > 4 * H.shape[1]:
            break
    else:
        return y_mean.reshape(-1, 3)
    h_mean = w @ H
    sw = np.sqrt(w)[:, None]
    beta, *_ = np.linalg.lstsq(sw * (H - h_mean), sw * (Y - y_mean), rcond=None)
    return (y_mean - h_mean @ beta).reshape(-1, 3)


def kl_loss_grad_points(
    corrs: CorrespondenceSet,
    intrinsics: CameraIntrinsics,
    pose_gt: Pose,
    samples: PosePosteriorSamples,
    n_points: int | None = None,
) -> np.ndarray:
    """Gradient of :func:`kl_loss` wrt every correspondence's 3D point.

    ``d cost(T_gt) / d P - E_posterior[d cost / d P]``; the expectation is the
    importance estimate from ``samples`` with a score control variate (see
    :func:`_posterior_mean_grad_points`). With ``n_points`` (and
    ``corrs.point_index`` set) the per-correspondence rows are scattered into
    an ``(n_points, 3)`` array; untouched points get zeros.
    """
    g_gt = _cost_grad_points(pose_gt.rotation[None], pose_gt.translation[None], corrs, intrinsics)[0]
    grad = g_gt - _posterior_mean_grad_points(samples, corrs, intrinsics)
    if n_points is None:
        return grad
    if corrs.point_index is None:
        raise ValueError("correspondences carry no point indices to scatter into")
    out = np.zeros((n_points, 3))
    np.add.at(out, corrs.point_index, grad)
    return out
