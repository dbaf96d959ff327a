"""Registration pipeline, run configuration and benchmark aggregation."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ParseError, VP2PError
from .geometry import CameraIntrinsics, Pose, RegistrationError, registration_error
from .io import read_cloud_bin, read_correspondences, read_features, read_pose, read_scores
from .losses import AWLossParams
from .matching import (
    DEFAULT_SIGMA,
    DEFAULT_TAU,
    CorrespondenceSet,
    detect_intersection,
    match_features,
    oracle_intersection_scores,
    pixel_grid_coords,
)
from .pnp import PnPConfig, gn_refine, ransac_epnp
from .synth import SceneConfig, generate_scene, synthesize_features

RTE_MAX = 2.0
RRE_MAX = 5.0
_RANSAC_STREAM = 3

# flat dotted keys accepted in config files and via --set, with their defaults
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out": "vp2p_out",
    "input": "",
    "jobs": 1,
    "scene.n_points": 4096,
    "scene.scene_extent": 40.0,
    "scene.pixel_noise_sigma": 0.0,
    "scene.outlier_fraction": 0.0,
    "scene.feature_noise_sigma": 0.0,
    "scene.feature_dim": 64,
    "scene.misregister": True,
    "camera.fx": 296.0,
    "camera.fy": 296.0,
    "camera.cx": 256.0,
    "camera.cy": 80.0,
    "camera.width": 512,
    "camera.height": 160,
    "match.sigma": DEFAULT_SIGMA,
    "match.tau": DEFAULT_TAU,
    "pnp.gn_max_iters": 50,
    "pnp.gn_tolerance": 1e-10,
    "pnp.ransac_iters": 1000,
    "pnp.ransac_inlier_px": 2.0,
    "pnp.ransac_min_inliers": 6,
    "pnp.ransac_confidence": 0.9999,
    "loss.margin": 0.25,
    "loss.gamma": 32.0,
    "loss.safe_radius": 1.0,
    "bench.trials": 100,
    "bench.drop_failures": False,
}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def merge_config(*layers: dict) -> dict:
    """Defaults overridden by each layer in turn; unknown keys are rejected."""
    flat = dict(DEFAULTS)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ValueError(f"unknown config key {key!r}")
            flat[key] = _coerce(key, value)
    return flat


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a JSON object of dotted keys")
    return data


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    pnp: PnPConfig = field(default_factory=PnPConfig)
    loss: AWLossParams = field(default_factory=AWLossParams)
    sigma: float = DEFAULT_SIGMA
    tau: float = DEFAULT_TAU
    seed: int = 0
    out: str = "vp2p_out"
    input: str = ""
    jobs: int = 1
    trials: int = 100
    drop_failures: bool = False

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("match.sigma must lie in [0, 1]")
        if not self.tau > 0:
            raise ValueError("match.tau must be positive")
        if self.jobs < 1 or self.trials < 1:
            raise ValueError("jobs and bench.trials must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def from_flat(cls, flat: dict) -> RunConfig:
        flat = merge_config(flat)

        def section(prefix, kind):
            names = {f.name for f in fields(kind)}
            return {k[len(prefix) + 1 :]: v for k, v in flat.items() if k.startswith(prefix + ".") and k[len(prefix) + 1 :] in names}

        intr = CameraIntrinsics(**section("camera", CameraIntrinsics))
        return cls(
            scene=SceneConfig(intrinsics=intr, seed=flat["seed"], **section("scene", SceneConfig)),
            pnp=PnPConfig(**section("pnp", PnPConfig)),
            loss=AWLossParams(**section("loss", AWLossParams)),
            sigma=flat["match.sigma"],
            tau=flat["match.tau"],
            seed=flat["seed"],
            out=flat["out"],
            input=flat["input"],
            jobs=flat["jobs"],
            trials=flat["bench.trials"],
            drop_failures=flat["bench.drop_failures"],
        )

    def with_seed(self, seed: int) -> RunConfig:
        from dataclasses import replace

        return replace(self, seed=seed, scene=replace(self.scene, seed=seed))


@dataclass
class RegisterResult:
    pose: Pose
    inlier_count: int
    n_correspondences: int
    cost: float
    error: RegistrationError | None = None
    timing: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_list(),
            "rte": None if self.error is None else self.error.rte,
            "rre": None if self.error is None else self.error.rre,
            "inlier_count": self.inlier_count,
            "n_correspondences": self.n_correspondences,
            "cost": self.cost,
        }


def estimate_pose(corrs: CorrespondenceSet, intrinsics: CameraIntrinsics, config: RunConfig, timing: dict) -> tuple:
    t0 = time.perf_counter()
    rng = np.random.default_rng([config.seed, _RANSAC_STREAM])
    ransac = ransac_epnp(corrs, intrinsics, config.pnp, rng)
    t1 = time.perf_counter()
    refined = gn_refine(corrs.subset(ransac.inliers), intrinsics, ransac.pose, config.pnp)
    timing["ransac"] = t1 - t0
    timing["gn"] = time.perf_counter() - t1
    return refined.pose, int(ransac.inliers.sum()), refined.cost


def register_synthetic(config: RunConfig) -> RegisterResult:
    """Synthesize a scene from ``config.scene`` and register it end to end."""
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    scene = generate_scene(config.scene)
    feats, scores, _ = synthesize_features(scene, config.scene)
    t1 = time.perf_counter()
    mask2d, mask3d = detect_intersection(scores, config.sigma)
    corrs = match_features(feats.f2d, feats.f3d, feats.pixel_coords, scene.cloud, mask2d, mask3d)
    t2 = time.perf_counter()
    timing["synth"] = t1 - t0
    timing["matching"] = t2 - t1
    pose, n_in, cost = estimate_pose(corrs, scene.intrinsics, config, timing)
    return RegisterResult(pose, n_in, len(corrs), cost, registration_error(pose, scene.pose_gt), timing)


def register_files(config: RunConfig, input_dir) -> RegisterResult:
    """Register from files written by ``vp2p synth`` (or compatible ones).

    ``correspondences.csv`` is used directly when present. Otherwise pixels
    are matched against points from ``features.bin`` + ``cloud.bin``, with
    intersection scores from ``scores.bin`` or, failing that, the ground-truth
    projection in ``pose_gt.json``; pixel locations are then cell centers.
    Everything is parsed before any work starts.
    """
    d = Path(input_dir)
    intr = config.scene.intrinsics
    pose_gt = read_pose(d / "pose_gt.json") if (d / "pose_gt.json").exists() else None
    timing: dict[str, float] = {}
    if (d / "correspondences.csv").exists():
        corrs = read_correspondences(d / "correspondences.csv")
        timing["matching"] = 0.0
    elif (d / "features.bin").exists():
        cloud = read_cloud_bin(d / "cloud.bin")
        f2d, f3d = read_features(d / "features.bin")
        if f2d.shape[0] != intr.n_pixels or f3d.shape[0] != cloud.shape[0]:
            raise ParseError(
                f"{d / 'features.bin'}: {f2d.shape[0]} pixels x {f3d.shape[0]} points does not match "
                f"{intr.n_pixels}-pixel camera and {cloud.shape[0]}-point cloud"
            )
        if (d / "scores.bin").exists():
            scores = read_scores(d / "scores.bin")
        elif pose_gt is not None:
            scores = oracle_intersection_scores(cloud, pose_gt, intr)
        else:
            raise ParseError(f"{d}: features.bin needs scores.bin or pose_gt.json")
        t0 = time.perf_counter()
        mask2d, mask3d = detect_intersection(scores, config.sigma)
        corrs = match_features(f2d, f3d, pixel_grid_coords(intr), cloud, mask2d, mask3d)
        timing["matching"] = time.perf_counter() - t0
    else:
        raise ParseError(f"{d}: neither correspondences.csv nor features.bin found")
    pose, n_in, cost = estimate_pose(corrs, intr, config, timing)
    err = None if pose_gt is None else registration_error(pose, pose_gt)
    return RegisterResult(pose, n_in, len(corrs), cost, err, timing)


# --------------------------------------------------------------------------
# benchmark

TRIAL_COLUMNS = ["trial", "seed", "status", "rte", "rre", "inlier_count", "n_correspondences", "cost", "error"]


def trial_seed(master: int, trial: int) -> int:
    return int(np.random.SeedSequence([master, trial]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def run_trial(config: RunConfig, trial: int) -> dict:
    seed = trial_seed(config.seed, trial)
    row = {"trial": trial, "seed": seed}
    try:
        res = register_synthetic(config.with_seed(seed))
    except VP2PError as exc:
        row.update(status="error", rte=math.inf, rre=math.inf, inlier_count=0, n_correspondences=0, cost=math.inf)
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["timing"] = {}
        return row
    row.update(
        status="ok",
        rte=res.error.rte,
        rre=res.error.rre,
        inlier_count=res.inlier_count,
        n_correspondences=res.n_correspondences,
        cost=res.cost,
        error="",
        timing=res.timing,
    )
    return row


def _run_trial_args(args):
    return run_trial(*args)


def run_bench(config: RunConfig) -> list[dict]:
    """Rows ordered by trial index regardless of ``config.jobs``."""
    jobs = [(config, k) for k in range(config.trials)]
    if config.jobs == 1:
        return [run_trial(c, k) for c, k in jobs]
    with ProcessPoolExecutor(max_workers=config.jobs) as pool:
        return list(pool.map(_run_trial_args, jobs))


def aggregate(rows: list[dict], drop_failures: bool = False) -> dict:
    """Mean and population std of RTE / RRE plus Acc over the (kept) rows.

    Failed rows carry ``rte = rre = inf`` and therefore count against Acc
    unless ``drop_failures`` removes them.
    """
    kept = [r for r in rows if not (drop_failures and r["status"] != "ok")]
    n_failed = sum(r["status"] != "ok" for r in rows)
    if not kept:
        nan = float("nan")
        return dict(trials=len(rows), used=0, failed=n_failed, rte_mean=nan, rte_std=nan, rre_mean=nan, rre_std=nan, acc=nan)
    rte = np.array([float(r["rte"]) for r in kept])
    rre = np.array([float(r["rre"]) for r in kept])
    with np.errstate(invalid="ignore"):
        stats = dict(
            rte_mean=float(np.mean(rte)),
            rte_std=float(np.std(rte)),
            rre_mean=float(np.mean(rre)),
            rre_std=float(np.std(rre)),
        )
    acc = float(np.mean((rte < RTE_MAX) & (rre < RRE_MAX)))
    return dict(trials=len(rows), used=len(kept), failed=n_failed, acc=acc, **stats)


def timing_summary(rows: list[dict]) -> dict:
    stages = sorted({k for r in rows for k in r.get("timing", {})})
    return {s: float(sum(r.get("timing", {}).get(s, 0.0) for r in rows)) for s in stages}


def format_table(agg: dict) -> str:
    return (
        f"RTE(m) {agg['rte_mean']:.4g} +- {agg['rte_std']:.4g} | "
        f"RRE(deg) {agg['rre_mean']:.4g} +- {agg['rre_std']:.4g} | "
        f"Acc {agg['acc']:.4f} ({agg['used']} used, {agg['failed']} failed of {agg['trials']})"
    )
