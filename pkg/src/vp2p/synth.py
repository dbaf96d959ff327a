"""Deterministic synthetic scenes with ground-truth poses, correspondences and features.

The LiDAR frame is x-forward, y-left, z-up. A scene is generated in that
frame, then moved by a random misregistration ``M``; the stored cloud is
``M * P`` and the ground-truth pose maps it into the camera through the fixed
mount: ``T_gt = mount * M^-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError
from .geometry import CameraIntrinsics, Pose, apply_pose, project, rot_z
from .matching import CorrespondenceSet, IntersectionScores, oracle_intersection_scores, pixel_cell_index, pixel_grid_coords
from .voxel import l2_normalize

# stream tags for per-purpose generators derived from one seed
_GEOMETRY, _CORRS, _FEATURES = 0, 1, 2

LIDAR_HEIGHT = 1.7


def default_mount() -> Pose:
    """LiDAR -> camera: camera z along LiDAR x, camera x along -y, camera y along -z."""
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return Pose(R, np.array([0.0, -0.08, -0.27]))


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 4096
    scene_extent: float = 40.0
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    feature_noise_sigma: float = 0.0
    seed: int = 0
    feature_dim: int = 64
    global_dim: int = 512
    misregister: bool = True
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.kitti_like)
    mount: Pose = field(default_factory=default_mount)

    def __post_init__(self):
        if self.n_points < 8:
            raise ValueError("n_points must be at least 8")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")
        if self.pixel_noise_sigma < 0 or self.feature_noise_sigma < 0 or not self.scene_extent > 0:
            raise ValueError("noise levels must be >= 0 and scene_extent > 0")

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed) & 0xFFFFFFFFFFFFFFFF, stream])


@dataclass(frozen=True)
class SyntheticScene:
    cloud: np.ndarray
    intrinsics: CameraIntrinsics
    pose_gt: Pose
    gt_pixel: np.ndarray
    gt_inlier_mask: np.ndarray
    misregistration: Pose


@dataclass(frozen=True)
class FeatureSet:
    """Pixel descriptors ``f2d`` (T x C, row-major pixel grid), point descriptors
    ``f3d`` (N x C), global vectors and the location of each pixel row.

    ``pixel_coords`` defaults to cell centers; keypoint cells carry sub-pixel
    locations.
    """

    f2d: np.ndarray
    f3d: np.ndarray
    g2d: np.ndarray
    g3d: np.ndarray
    pixel_coords: np.ndarray


def sample_misregistration(rng: np.random.Generator, max_translation: float = 10.0) -> Pose:
    """Ground-plane translation in +-``max_translation`` m and a free yaw about the up axis."""
    x, y = rng.uniform(-max_translation, max_translation, size=2)
    yaw = rng.uniform(0.0, 2.0 * math.pi)
    return Pose(rot_z(yaw), np.array([x, y, 0.0]))


def _box_surface_points(rng, n, center, size, yaw):
    """Uniform samples on the four side faces and the top of an upright box."""
    sx, sy, sz = size
    areas = np.array([sx * sz, sx * sz, sy * sz, sy * sz, sx * sy])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    local = u * np.array(size)
    local[face == 0, 1] = -sy / 2
    local[face == 1, 1] = sy / 2
    local[face == 2, 0] = -sx / 2
    local[face == 3, 0] = sx / 2
    local[face == 4, 2] = sz / 2
    return local @ rot_z(yaw).T + center


def _scene_points(rng: np.random.Generator, n: int, extent: float) -> np.ndarray:
    half = extent / 2.0
    n_ground = int(0.4 * n)
    n_boxes = int(0.4 * n)
    n_clutter = n - n_ground - n_boxes
    ground = np.column_stack(
        [rng.uniform(-half, half, n_ground), rng.uniform(-half, half, n_ground), -LIDAR_HEIGHT + rng.normal(0, 0.02, n_ground)]
    )
    n_box = 8
    per_box = np.diff(np.linspace(0, n_boxes, n_box + 1).astype(int))
    boxes = []
    for k in range(n_box):
        size = rng.uniform([1.5, 1.5, 1.5], [4.0, 4.0, 3.5])
        center = np.array([*rng.uniform(-half + 3.0, half - 3.0, 2), -LIDAR_HEIGHT + size[2] / 2])
        boxes.append(_box_surface_points(rng, per_box[k], center, size, rng.uniform(0, math.pi)))
    clutter = np.column_stack(
        [rng.uniform(-half, half, n_clutter), rng.uniform(-half, half, n_clutter), rng.uniform(-LIDAR_HEIGHT, 3.0, n_clutter)]
    )
    return np.vstack([ground, *boxes, clutter])


def generate_scene(config: SceneConfig) -> SyntheticScene:
    rng = config.rng(_GEOMETRY)
    points = _scene_points(rng, config.n_points, config.scene_extent)
    misreg = sample_misregistration(rng) if config.misregister else Pose.identity()
    # stored clouds are float32 on disk; keep the in-memory copy exactly representable
    cloud = apply_pose(misreg, points).astype(np.float32).astype(np.float64)
    pose_gt = config.mount.compose(misreg.inverse())
    gt_pixel, valid = project(config.intrinsics, apply_pose(pose_gt, cloud))
    return SyntheticScene(cloud, config.intrinsics, pose_gt, gt_pixel, valid, misreg)


def make_correspondences(scene: SyntheticScene, config: SceneConfig) -> CorrespondenceSet:
    """One entry per visible point, with pixel noise and uniform outlier relocations."""
    idx = np.flatnonzero(scene.gt_inlier_mask)
    n = idx.size
    if n < 6:
        raise InsufficientDataError(f"scene has {n} visible points, need at least 6")
    rng = config.rng(_CORRS)
    intr = scene.intrinsics
    noise = rng.standard_normal((n, 2))
    pixels = scene.gt_pixel[idx] + config.pixel_noise_sigma * noise
    n_out = int(math.floor(config.outlier_fraction * n + 0.5))
    out_idx = rng.choice(n, size=n_out, replace=False)
    uniform = rng.uniform([0.0, 0.0], [intr.width, intr.height], size=(n_out, 2))
    pixels[out_idx] = uniform
    upper = np.nextafter(np.array([intr.width, intr.height], dtype=np.float64), 0.0)
    pixels = np.clip(pixels, 0.0, upper)
    outlier = np.zeros(n, dtype=bool)
    outlier[out_idx] = True
    return CorrespondenceSet(pixels, scene.cloud[idx], np.ones(n), point_index=idx, outlier=outlier)


def synthesize_features(
    scene: SyntheticScene,
    config: SceneConfig,
    rng: np.random.Generator | None = None,
    corrs: CorrespondenceSet | None = None,
):
    """Descriptors for which matching recovers ``corrs`` exactly when noise-free.

    Every point gets a random unit descriptor. For each correspondence the
    pixel cell holding the point's true projection receives a noisy copy of it
    and records the (possibly noisy or relocated) measured pixel location.
    Remaining pixels get independent random unit descriptors. Returns
    ``(features, scores, pixel_point)`` where ``pixel_point[j]`` is the point
    whose descriptor was planted in pixel ``j`` (-1 for none).

    The noise draw does not depend on ``feature_noise_sigma``, so a fixed seed
    gives common random numbers across a noise sweep.
    """
    rng = config.rng(_FEATURES) if rng is None else rng
    corrs = make_correspondences(scene, config) if corrs is None else corrs
    intr = scene.intrinsics
    C = config.feature_dim
    f3d = l2_normalize(rng.standard_normal((scene.cloud.shape[0], C)))
    f2d = rng.standard_normal((intr.n_pixels, C), dtype=np.float32)
    f2d /= np.linalg.norm(f2d, axis=1, keepdims=True)
    g2d = l2_normalize(rng.standard_normal(config.global_dim))
    g3d = l2_normalize(rng.standard_normal(config.global_dim))
    noise = rng.standard_normal((len(corrs), C))

    pixel_coords = pixel_grid_coords(intr)
    pixel_point = np.full(intr.n_pixels, -1, dtype=np.int64)
    cells = pixel_cell_index(scene.gt_pixel[corrs.point_index], intr.width)
    planted = l2_normalize(f3d[corrs.point_index] + config.feature_noise_sigma * noise)
    # later entries win when two points share a cell
    f2d[cells] = planted
    pixel_coords[cells] = corrs.pixels
    pixel_point[cells] = corrs.point_index
    f3d = f3d.astype(np.float32)
    scores = oracle_intersection_scores(scene.cloud, scene.pose_gt, intr)
    return FeatureSet(f2d, f3d, g2d, g3d, pixel_coords), scores, pixel_point



def matching_accuracy(corrs: CorrespondenceSet, pixel_point: np.ndarray) -> float:
    """Fraction of matched pixels that hold a planted descriptor and were
    paired with the point it came from."""
    owner = np.asarray(pixel_point)[corrs.pixel_index]
    planted = owner >= 0
    if not planted.any():
        return float("nan")
    return float(np.mean(corrs.point_index[planted] == owner[planted]))
