"""Finite-difference verification of every analytic derivative in the package.

Each check returns the maximum relative deviation
``max_run ||g_analytic - g_fd||_inf / ||g_fd||_inf`` over its random runs
(the KL check uses the Euclidean norm) and compares it to a fixed tolerance.
``corrupt`` names a check whose analytic gradient is deliberately scaled by
1.1, as a negative control for the harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, apply_pose, project, se3_retract, so3_exp
from .losses import AWLossParams, aw_loss_terms, aw_weights, pose_loss, pose_loss_grad
from .matching import CorrespondenceSet
from .pnp import PnPConfig, gn_refine, pose_jacobian, residuals
from .posterior import AMISConfig, amis_sample_posterior, kl_loss, kl_loss_grad_points

TOLERANCES = {"aw_loss": 1e-6, "gn_jacobian": 1e-4, "kl_grad": 1e-2, "pose_loss": 1e-6}
CHECKS = tuple(TOLERANCES)
_CORRUPT_SCALE = 1.1


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_dev: float
    tolerance: float
    runs: int
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" {self.detail}" if self.detail else ""
        return f"{self.name:<12} max_rel_dev={self.max_rel_dev:.3e} tol={self.tolerance:.0e} runs={self.runs} {status}{extra}"


def _rel(ga: np.ndarray, gfd: np.ndarray, ord=np.inf) -> float:
    den = np.linalg.norm(np.ravel(gfd), ord)
    num = np.linalg.norm(np.ravel(ga - gfd), ord)
    return float(num / den) if den > 0 else float(num)


def _result(name, devs, ok=True, detail="") -> CheckResult:
    worst = float(np.max(devs))
    tol = TOLERANCES[name]
    return CheckResult(name, worst, tol, len(devs), bool(ok and worst < tol), detail)


def random_partition(rng: np.random.Generator):
    s_p = rng.uniform(-1.0, 1.0, rng.integers(1, 16))
    s_n = rng.uniform(-1.0, 1.0, rng.integers(1, 32))
    return s_p, s_n


def check_aw_loss(seed: int = 0, runs: int = 1000, h: float = 1e-5, corrupt: bool = False) -> CheckResult:
    rng = np.random.default_rng([seed, 101])
    params = AWLossParams()
    devs = []
    for _ in range(runs):
        s_p, s_n = random_partition(rng)
        rho_p, rho_n = aw_weights(s_p, s_n, params)
        _, gp, gn = aw_loss_terms(s_p, s_n, params)
        ga = np.concatenate([gp, gn]) * (_CORRUPT_SCALE if corrupt else 1.0)
        x = np.concatenate([s_p, s_n])
        k = s_p.size

        def f(v):
            return aw_loss_terms(v[:k], v[k:], params, rho_p, rho_n)[0]

        gfd = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            gfd[i] = (f(x + e) - f(x - e)) / (2 * h)
        devs.append(_rel(ga, gfd))
    return _result("aw_loss", devs)


def random_pnp_problem(rng: np.random.Generator, n: int, intrinsics: CameraIntrinsics, noise: float = 1.0):
    """Random pose and points in front of the camera with noisy pixels."""
    pose = Pose(so3_exp(rng.normal(size=3)), rng.uniform(-2.0, 2.0, 3))
    Xc = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-2, 2, n), rng.uniform(2.0, 30.0, n)])
    pts = apply_pose(pose.inverse(), Xc)
    uv, _ = project(intrinsics, Xc)
    return pose, CorrespondenceSet(uv + noise * rng.standard_normal((n, 2)), pts, np.ones(n))


def check_gn_jacobian(seed: int = 0, runs: int = 100, h: float = 1e-6, corrupt: bool = False) -> CheckResult:
    """Residual Jacobian vs central differences, plus cost monotonicity of GN runs."""
    rng = np.random.default_rng([seed, 102])
    intr = CameraIntrinsics.kitti_like()
    devs = []
    monotone = True
    for _ in range(runs):
        pose, corrs = random_pnp_problem(rng, int(rng.integers(6, 40)), intr)
        _, X, front = residuals(pose, corrs.pixels, corrs.points, intr)
        Ja = pose_jacobian(X, front, intr).reshape(-1, 6) * (_CORRUPT_SCALE if corrupt else 1.0)
        Jfd = np.empty_like(Ja)
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            rp, _, _ = residuals(se3_retract(pose, e), corrs.pixels, corrs.points, intr)
            rm, _, _ = residuals(se3_retract(pose, -e), corrs.pixels, corrs.points, intr)
            Jfd[:, j] = (rp - rm).reshape(-1) / (2 * h)
        devs.append(_rel(Ja, Jfd))
        init = se3_retract(pose, np.concatenate([rng.normal(0, 0.05, 3), rng.normal(0, 0.5, 3)]))
        costs = gn_refine(corrs, intr, init, PnPConfig()).costs
        monotone &= bool(np.all(np.diff(costs) <= 0.0))
    return _result("gn_jacobian", devs, monotone, "" if monotone else "cost increased in a GN run")


def check_pose_loss(seed: int = 0, runs: int = 100, h: float = 1e-6, corrupt: bool = False) -> CheckResult:
    rng = np.random.default_rng([seed, 104])
    devs = []
    for _ in range(runs):
        a = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        b = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        ga = pose_loss_grad(a, b) * (_CORRUPT_SCALE if corrupt else 1.0)
        gfd = np.array([(pose_loss(se3_retract(a, h * e), b) - pose_loss(se3_retract(a, -h * e), b)) / (2 * h) for e in np.eye(6)])
        devs.append(_rel(ga, gfd))
    return _result("pose_loss", devs)


# intrinsics for the small posterior toys
TOY_INTRINSICS = CameraIntrinsics(100.0, 100.0, 100.0, 100.0, 200, 200)
KL_TOY_DOFS = (3, 4)


def kl_toy(rng: np.random.Generator):
    """One correspondence with the posterior over (tx, ty): exactly Gaussian."""
    pose = Pose(so3_exp(rng.normal(0, 0.3, 3)), rng.uniform(-1, 1, 3))
    Xc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3.0, 8.0)])
    uv, _ = project(TOY_INTRINSICS, Xc[None])
    pixel = uv + rng.standard_normal((1, 2))
    pts = apply_pose(pose.inverse(), Xc[None])
    return pose, CorrespondenceSet(pixel, pts, np.ones(1))


def _kl_with_points(corrs, pose_gt, points, sample_seed, amis):
    c = corrs.with_points(points)
    post = amis_sample_posterior(c, TOY_INTRINSICS, rng=np.random.default_rng(sample_seed), amis=amis, init=pose_gt, dofs=KL_TOY_DOFS)
    return c, post


def check_kl_grad(seed: int = 0, runs: int = 50, h: float = 1e-5, corrupt: bool = False) -> CheckResult:
    """KL gradient wrt points vs common-random-number central differences."""
    rng = np.random.default_rng([seed, 103])
    amis = AMISConfig()
    devs = []
    for run in range(runs):
        pose_gt, corrs = kl_toy(rng)
        sample_seed = [seed, 103, run]
        c, post = _kl_with_points(corrs, pose_gt, corrs.points, sample_seed, amis)
        ga = kl_loss_grad_points(c, TOY_INTRINSICS, pose_gt, post) * (_CORRUPT_SCALE if corrupt else 1.0)
        gfd = np.empty_like(ga)
        for i in np.ndindex(*corrs.points.shape):
            vals = []
            for sgn in (1.0, -1.0):
                p = corrs.points.copy()
                p[i] += sgn * h
                cp, pp = _kl_with_points(corrs, pose_gt, p, sample_seed, amis)
                vals.append(kl_loss(cp, TOY_INTRINSICS, pose_gt, pp))
            gfd[i] = (vals[0] - vals[1]) / (2 * h)
        devs.append(_rel(ga, gfd, ord=2))
    return _result("kl_grad", devs)


_RUNNERS = {
    "aw_loss": check_aw_loss,
    "gn_jacobian": check_gn_jacobian,
    "kl_grad": check_kl_grad,
    "pose_loss": check_pose_loss,
}


def run_checks(seed: int = 0, corrupt: str | None = None, only=None) -> list[CheckResult]:
    if corrupt is not None and corrupt not in _RUNNERS:
        raise ValueError(f"unknown check {corrupt!r}; choose from {', '.join(CHECKS)}")
    names = CHECKS if only is None else tuple(only)
    return [_RUNNERS[name](seed=seed, corrupt=(name == corrupt)) for name in names]
