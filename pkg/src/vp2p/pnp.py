"""Deterministic pose estimation from 2D-3D correspondences.

EPnP closed form, damped Gauss-Newton refinement on the left SE(3)
increment, and RANSAC around EPnP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    EmptySetError,
    InsufficientDataError,
    NoConsensusError,
    NonConvergenceError,
)
from .geometry import Z_MIN, CameraIntrinsics, Pose, se3_retract
from .matching import CorrespondenceSet

RESIDUAL_CAP = 1e4
EPNP_MIN_POINTS = 4
RANSAC_SAMPLE_SIZE = 6


@dataclass(frozen=True)
class PnPConfig:
    gn_max_iters: int = 50
    gn_tolerance: float = 1e-10
    ransac_iters: int = 1000
    ransac_inlier_px: float = 2.0
    ransac_min_inliers: int = 6
    # early exit once this confidence of having drawn an all-inlier sample is reached
    ransac_confidence: float = 0.9999

    def __post_init__(self):
        if min(self.gn_max_iters, self.gn_tolerance, self.ransac_iters, self.ransac_inlier_px, self.ransac_min_inliers) <= 0:
            raise ValueError("PnP configuration values must be positive")
        if not 0 < self.ransac_confidence <= 1:
            raise ValueError("ransac_confidence must lie in (0, 1]")


# --------------------------------------------------------------------------
# reprojection model


def camera_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    return points @ pose.rotation.T + pose.translation


def residuals(pose: Pose, pixels: np.ndarray, points: np.ndarray, intrinsics: CameraIntrinsics):
    """Reprojection residuals ``pi(R P + t) - I`` as an ``(M, 2)`` array.

    Points at or behind ``Z_MIN`` get a constant residual of ``RESIDUAL_CAP``
    per axis. Also returns the camera-frame points and the in-front mask.
    """
    X = camera_points(pose, points)
    z = X[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    r = np.empty((X.shape[0], 2))
    r[:, 0] = intrinsics.fx * X[:, 0] / zs + intrinsics.cx - pixels[:, 0]
    r[:, 1] = intrinsics.fy * X[:, 1] / zs + intrinsics.cy - pixels[:, 1]
    r[~front] = RESIDUAL_CAP
    return r, X, front


def projection_jacobian(X: np.ndarray, front: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """d pi / d X_cam, shape ``(M, 2, 3)``; zero for capped points."""
    z = np.where(front, X[:, 2], 1.0)
    J = np.zeros((X.shape[0], 2, 3))
    J[:, 0, 0] = intrinsics.fx / z
    J[:, 0, 2] = -intrinsics.fx * X[:, 0] / z**2
    J[:, 1, 1] = intrinsics.fy / z
    J[:, 1, 2] = -intrinsics.fy * X[:, 1] / z**2
    J[~front] = 0.0
    return J


def pose_jacobian(X: np.ndarray, front: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """d residual / d [omega, v] for the left increment, shape ``(M, 2, 6)``."""
    Jp = projection_jacobian(X, front, intrinsics)
    # d X / d omega = -[X]x ; d X / d v = I
    dX = np.zeros((X.shape[0], 3, 6))
    dX[:, 0, 1], dX[:, 0, 2] = X[:, 2], -X[:, 1]
    dX[:, 1, 0], dX[:, 1, 2] = -X[:, 2], X[:, 0]
    dX[:, 2, 0], dX[:, 2, 1] = X[:, 1], -X[:, 0]
    dX[:, :, 3:] = np.eye(3)
    return Jp @ dX


def reprojection_cost(pose: Pose, corrs: CorrespondenceSet, intrinsics: CameraIntrinsics) -> float:
    """Half the summed squared reprojection error."""
    if len(corrs) == 0:
        raise EmptySetError("reprojection cost needs at least one correspondence")
    r, _, _ = residuals(pose, corrs.pixels, corrs.points, intrinsics)
    return 0.5 * float(np.sum(r * r))


def reprojection_errors(pose: Pose, corrs: CorrespondenceSet, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Per-correspondence pixel distance (inf for points behind the camera)."""
    r, _, front = residuals(pose, corrs.pixels, corrs.points, intrinsics)
    return np.where(front, np.hypot(r[:, 0], r[:, 1]), np.inf)


# --------------------------------------------------------------------------
# EPnP

_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _bb(b: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4 = b
    return np.array([b1 * b1, b1 * b2, b2 * b2, b1 * b3, b2 * b3, b3 * b3, b1 * b4, b2 * b4, b3 * b4, b4 * b4])


def _bb_jac(b: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4 = b
    return np.array(
        [
            [2 * b1, 0, 0, 0],
            [b2, b1, 0, 0],
            [0, 2 * b2, 0, 0],
            [b3, 0, b1, 0],
            [0, b3, b2, 0],
            [0, 0, 2 * b3, 0],
            [b4, 0, 0, b1],
            [0, b4, 0, b2],
            [0, 0, b4, b3],
            [0, 0, 0, 2 * b4],
        ]
    )


def _rigid_fit(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation and translation with ``dst ~ R src + t``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def _epnp_normalized(pw: np.ndarray, xn: np.ndarray):
    n = pw.shape[0]
    c0 = pw.mean(axis=0)
    A = pw - c0
    evals, evecs = np.linalg.eigh(A.T @ A / n)
    if evals[2] <= 0 or evals[0] < 1e-12 * evals[2]:
        raise DegenerateConfigurationError("3D points are (nearly) coplanar or collinear")
    cw = np.vstack([c0, c0 + np.sqrt(evals)[:, None] * evecs.T])
    alphas = np.empty((n, 4))
    alphas[:, 1:] = np.linalg.solve((cw[1:] - c0).T, A.T).T
    alphas[:, 0] = 1.0 - alphas[:, 1:].sum(axis=1)

    M = np.zeros((2 * n, 12))
    M[0::2, 0::3] = alphas
    M[0::2, 2::3] = -alphas * xn[:, :1]
    M[1::2, 1::3] = alphas
    M[1::2, 2::3] = -alphas * xn[:, 1:]
    if M.shape[0] < 12:
        M = np.vstack([M, np.zeros((12 - M.shape[0], 12))])
    # QR first keeps the SVD at 12x12 regardless of n
    Rm = np.linalg.qr(M, mode="r")
    _, S, Vt = np.linalg.svd(Rm)
    if S[0] <= 0 or S[-5] < 1e-12 * S[0]:
        raise DegenerateConfigurationError("EPnP system is rank deficient")
    V = Vt[::-1][:4]  # V[0] spans the (near) null space

    dv = np.array([[V[k].reshape(4, 3)[i] - V[k].reshape(4, 3)[j] for i, j in _PAIRS] for k in range(4)])
    L = np.empty((6, 10))
    L[:, 0] = np.einsum("pi,pi->p", dv[0], dv[0])
    L[:, 1] = 2 * np.einsum("pi,pi->p", dv[0], dv[1])
    L[:, 2] = np.einsum("pi,pi->p", dv[1], dv[1])
    L[:, 3] = 2 * np.einsum("pi,pi->p", dv[0], dv[2])
    L[:, 4] = 2 * np.einsum("pi,pi->p", dv[1], dv[2])
    L[:, 5] = np.einsum("pi,pi->p", dv[2], dv[2])
    L[:, 6] = 2 * np.einsum("pi,pi->p", dv[0], dv[3])
    L[:, 7] = 2 * np.einsum("pi,pi->p", dv[1], dv[3])
    L[:, 8] = 2 * np.einsum("pi,pi->p", dv[2], dv[3])
    L[:, 9] = np.einsum("pi,pi->p", dv[3], dv[3])
    rho = np.array([np.sum((cw[i] - cw[j]) ** 2) for i, j in _PAIRS])

    def refine(b):
        for _ in range(10):
            f = L @ _bb(b) - rho
            J = L @ _bb_jac(b)
            step = np.linalg.lstsq(J, -f, rcond=None)[0]
            b = b + step
            if np.max(np.abs(step)) < 1e-15 * max(1.0, np.max(np.abs(b))):
                break
        return b

    def pose_from_betas(b):
        cc = (b @ V).reshape(4, 3)
        pc = alphas @ cc
        if np.sum(pc[:, 2]) < 0:
            pc = -pc
        R, t = _rigid_fit(pw, pc)
        Xc = pw @ R.T + t
        z = np.where(Xc[:, 2] > Z_MIN, Xc[:, 2], np.nan)
        err = np.sum((Xc[:, :2] / z[:, None] - xn) ** 2)
        return R, t, (err if np.isfinite(err) else np.inf)

    candidates = []
    # N = 1: scale fixed by matching control-point distances
    c1 = V[0].reshape(4, 3)
    d_cam = np.array([np.linalg.norm(c1[i] - c1[j]) for i, j in _PAIRS])
    d_w = np.sqrt(rho)
    candidates.append(np.array([d_cam @ d_w / (d_cam @ d_cam), 0.0, 0.0, 0.0]))
    # N = 2: linearised over (b11, b12, b22)
    x = np.linalg.lstsq(L[:, :3], rho, rcond=None)[0]
    b1 = math.sqrt(abs(x[0]))
    b2 = math.sqrt(abs(x[2])) if x[0] * x[2] > 0 else 0.0
    candidates.append(np.array([b1, math.copysign(b2, x[1] * np.sign(x[0]) or 1.0), 0.0, 0.0]))
    # N = 3: linearised over (b11, b12, b22, b13, b23)
    x = np.linalg.lstsq(L[:, :5], rho, rcond=None)[0]
    b1 = math.sqrt(abs(x[0]))
    b2 = math.sqrt(abs(x[2])) if x[0] * x[2] > 0 else 0.0
    b1s = b1 if b1 > 0 else 1.0
    candidates.append(np.array([b1, math.copysign(b2, x[1] * np.sign(x[0]) or 1.0), x[3] / b1s, 0.0]))

    best = None
    for b in candidates:
        R, t, err = pose_from_betas(refine(b))
        if best is None or err < best[2]:
            best = (R, t, err)
    return best[0], best[1]


def epnp_solve(corrs: CorrespondenceSet, intrinsics: CameraIntrinsics) -> Pose:
    """EPnP closed-form pose from at least four correspondences."""
    n = len(corrs)
    if n < EPNP_MIN_POINTS:
        raise InsufficientDataError(f"EPnP needs at least {EPNP_MIN_POINTS} correspondences, got {n}")
    xn = np.column_stack(
        [(corrs.pixels[:, 0] - intrinsics.cx) / intrinsics.fx, (corrs.pixels[:, 1] - intrinsics.cy) / intrinsics.fy]
    )
    try:
        R, t = _epnp_normalized(corrs.points, xn)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError(str(exc)) from exc
    return Pose(R, t)


# --------------------------------------------------------------------------
# Gauss-Newton


@dataclass
class GNResult:
    pose: Pose
    cost: float
    costs: list[float] = field(default_factory=list)
    iterations: int = 0


def gn_refine(
    corrs: CorrespondenceSet,
    intrinsics: CameraIntrinsics,
    init: Pose,
    config: PnPConfig = PnPConfig(),
    lambda_init: float = 1e-4,
    lambda_max: float = 1e12,
) -> GNResult:
    """Levenberg-damped Gauss-Newton on the reprojection cost.

    ``costs`` records the cost after every accepted step (starting with the
    initial cost) and is non-increasing by construction.
    """
    if len(corrs) == 0:
        raise EmptySetError("Gauss-Newton needs at least one correspondence")
    if len(corrs) < EPNP_MIN_POINTS:
        # fewer than four points leave the pose ambiguous (up to four P3P solutions)
        raise InsufficientDataError(f"Gauss-Newton needs at least {EPNP_MIN_POINTS} correspondences, got {len(corrs)}")
    pose = init
    r, X, front = residuals(pose, corrs.pixels, corrs.points, intrinsics)
    cost = 0.5 * float(np.sum(r * r))
    costs = [cost]
    lam = lambda_init
    it = 0
    J = None
    while it < config.gn_max_iters and cost > 0.0:
        it += 1
        if J is None:
            J = pose_jacobian(X, front, intrinsics).reshape(-1, 6)
            g = J.T @ r.reshape(-1)
            H = J.T @ J
            d = np.maximum(np.diag(H), 1e-12 * max(float(np.max(np.diag(H))), 1e-300))
        try:
            step = np.linalg.solve(H + lam * np.diag(d), -g)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError("non-finite step")
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > lambda_max:
                raise NonConvergenceError("normal equations could not be solved", best_pose=pose, best_cost=cost)
            continue
        cand = se3_retract(pose, step)
        r_new, X_new, front_new = residuals(cand, corrs.pixels, corrs.points, intrinsics)
        new_cost = 0.5 * float(np.sum(r_new * r_new))
        if new_cost <= cost:
            decrease = cost - new_cost
            pose, r, X, front, cost = cand, r_new, X_new, front_new, new_cost
            costs.append(cost)
            J = None
            lam = max(lam / 10.0, 1e-12)
            if decrease < config.gn_tolerance:
                break
        else:
            lam *= 10.0
            if lam > lambda_max:
                break
    return GNResult(pose, cost, costs, it)


# --------------------------------------------------------------------------
# RANSAC


@dataclass
class RansacResult:
    pose: Pose
    inliers: np.ndarray
    cost: float
    iterations: int


def _required_iterations(inlier_ratio: float, confidence: float, sample: int) -> float:
    if confidence >= 1.0:
        return math.inf
    p_good = inlier_ratio**sample
    if p_good <= 0.0:
        return math.inf
    if p_good >= 1.0:
        return 1.0
    denom = math.log1p(-p_good)
    return math.inf if denom == 0.0 else math.log1p(-confidence) / denom


def ransac_epnp(
    corrs: CorrespondenceSet,
    intrinsics: CameraIntrinsics,
    config: PnPConfig = PnPConfig(),
    rng: np.random.Generator | None = None,
) -> RansacResult:
    """RANSAC over 6-point EPnP hypotheses, then EPnP + Gauss-Newton on the consensus."""
    n = len(corrs)
    if n < max(config.ransac_min_inliers, RANSAC_SAMPLE_SIZE):
        raise InsufficientDataError(f"RANSAC needs at least {max(config.ransac_min_inliers, RANSAC_SAMPLE_SIZE)} correspondences, got {n}")
    rng = np.random.default_rng(0) if rng is None else rng
    best_mask = None
    best_count = 0
    budget = float(config.ransac_iters)
    it = 0
    while it < min(budget, config.ransac_iters):
        it += 1
        sample = rng.choice(n, RANSAC_SAMPLE_SIZE, replace=False)
        try:
            hyp = epnp_solve(corrs.subset(sample), intrinsics)
        except (DegenerateConfigurationError, InsufficientDataError, ValueError):
            continue
        mask = reprojection_errors(hyp, corrs, intrinsics) < config.ransac_inlier_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            budget = _required_iterations(count / n, config.ransac_confidence, RANSAC_SAMPLE_SIZE)
    if best_mask is None or best_count < config.ransac_min_inliers:
        raise NoConsensusError(f"best consensus has {best_count} inliers, need {config.ransac_min_inliers}")

    inliers = corrs.subset(best_mask)
    try:
        pose = epnp_solve(inliers, intrinsics)
    except DegenerateConfigurationError as exc:
        raise NoConsensusError(f"consensus set is degenerate: {exc}") from exc
    result = gn_refine(inliers, intrinsics, pose, config)
    mask = reprojection_errors(result.pose, corrs, intrinsics) < config.ransac_inlier_px
    if not np.array_equal(mask, best_mask) and mask.sum() >= config.ransac_min_inliers:
        result = gn_refine(corrs.subset(mask), intrinsics, result.pose, config)
        mask = reprojection_errors(result.pose, corrs, intrinsics) < config.ransac_inlier_px
    return RansacResult(result.pose, mask, result.cost, it)
