"""Cross-modal similarity, intersection masking and 2D->3D correspondences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import DimensionError, EmptySetError
from .geometry import CameraIntrinsics, Pose, apply_pose, project

DEFAULT_SIGMA = 0.95
DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class IntersectionScores:
    """Per-pixel (``d2d``, length T) and per-point (``d3d``, length N) probabilities."""

    d2d: np.ndarray
    d3d: np.ndarray

    def __post_init__(self):
        for name in ("d2d", "d3d"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if a.size and (np.any(~np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0):
                raise ValueError(f"{name} must hold probabilities in [0, 1]")
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched 2D-3D pairs.

    ``pixels`` is ``(M, 2)`` in pixels, ``points`` is ``(M, 3)`` in meters.
    The optional index arrays tie entries back to the source pixel grid /
    point cloud; ``outlier`` is ground-truth bookkeeping for synthetic data.
    """

    pixels: np.ndarray
    points: np.ndarray
    similarity: np.ndarray | None = None
    pixel_index: np.ndarray | None = None
    point_index: np.ndarray | None = None
    outlier: np.ndarray | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if px.shape[0] != pts.shape[0]:
            raise DimensionError(f"{px.shape[0]} pixels vs {pts.shape[0]} points")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pts)
        sim = np.ones(px.shape[0]) if self.similarity is None else np.asarray(self.similarity, dtype=np.float64)
        object.__setattr__(self, "similarity", sim.reshape(-1))
        for name in ("pixel_index", "point_index", "outlier"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v).reshape(-1)
                if v.shape[0] != px.shape[0]:
                    raise DimensionError(f"{name} has {v.shape[0]} entries, expected {px.shape[0]}")
                object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    def subset(self, mask) -> CorrespondenceSet:
        sel = np.asarray(mask)
        pick = lambda a: None if a is None else a[sel]  # noqa: E731
        return CorrespondenceSet(
            self.pixels[sel],
            self.points[sel],
            self.similarity[sel],
            pick(self.pixel_index),
            pick(self.point_index),
            pick(self.outlier),
        )

    def with_points(self, points: np.ndarray) -> CorrespondenceSet:
        return CorrespondenceSet(self.pixels, points, self.similarity, self.pixel_index, self.point_index, self.outlier)

    def with_pixels(self, pixels: np.ndarray) -> CorrespondenceSet:
        return CorrespondenceSet(pixels, self.points, self.similarity, self.pixel_index, self.point_index, self.outlier)


def similarity_matrix(f2d: np.ndarray, f3d: np.ndarray) -> np.ndarray:
    """Dot products between all pixel and point descriptors (cosine for unit rows)."""
    f2d = np.asarray(f2d, dtype=np.float64)
    f3d = np.asarray(f3d, dtype=np.float64)
    if f2d.ndim != 2 or f3d.ndim != 2 or f2d.shape[1] != f3d.shape[1]:
        raise DimensionError(f"channel mismatch: {f2d.shape} vs {f3d.shape}")
    return f2d @ f3d.T


def detect_intersection(scores: IntersectionScores, sigma: float = DEFAULT_SIGMA):
    """Keep elements whose probability is at least ``sigma``."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    return scores.d2d >= sigma, scores.d3d >= sigma


def detection_loss(d_in_2d, d_in_3d, d_out_2d, d_out_3d) -> float:
    """Mean outlier probability minus mean inlier probability (2D + 3D), in [-2, 2]."""
    d_in_2d, d_in_3d, d_out_2d, d_out_3d = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (d_in_2d, d_in_3d, d_out_2d, d_out_3d))
    if d_in_2d.size == 0 or d_out_2d.size == 0:
        raise EmptySetError("detection loss needs at least one inlier and one outlier sample")
    if d_in_2d.shape != d_in_3d.shape or d_out_2d.shape != d_out_3d.shape:
        raise DimensionError("2D and 3D samples must be paired")
    return float(np.mean(d_out_2d + d_out_3d) - np.mean(d_in_2d + d_in_3d))


def detection_samples(
    scores: IntersectionScores,
    inlier_2d: np.ndarray,
    inlier_3d: np.ndarray,
    z_in: int,
    z_out: int,
    rng: np.random.Generator,
):
    """Draw ``z_in`` inlier and ``z_out`` outlier probabilities per modality.

    Equal counts give a balanced loss; counts proportional to the pool sizes
    reproduce the plain per-element average. Pools smaller than the request
    are sampled with replacement. Returns the four argument vectors of
    :func:`detection_loss`.
    """
    if z_in < 1 or z_out < 1:
        raise ValueError("z_in and z_out must be at least 1")
    out = []
    for count, keep in ((z_in, True), (z_out, False)):
        for d, mask in ((scores.d2d, inlier_2d), (scores.d3d, inlier_3d)):
            pool = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1) == keep)
            if pool.size == 0:
                raise EmptySetError(f"no {'inlier' if keep else 'outlier'} elements to sample")
            out.append(d[rng.choice(pool, size=count, replace=pool.size < count)])
    return tuple(out)


def pixel_cell_index(uv: np.ndarray, width: int) -> np.ndarray:
    """Row-major index of the pixel cell ``[col, col+1) x [row, row+1)`` holding each ``uv``."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    return np.floor(uv[:, 1]).astype(np.int64) * width + np.floor(uv[:, 0]).astype(np.int64)


def pixel_grid_coords(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Center coordinates of every pixel cell, row-major, shape ``(H*W, 2)``."""
    v, u = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width]
    return np.stack([u.reshape(-1) + 0.5, v.reshape(-1) + 0.5], axis=1).astype(np.float64)


def oracle_intersection_scores(
    points: np.ndarray, pose_gt: Pose, intrinsics: CameraIntrinsics, radius_px: int = 0
) -> IntersectionScores:
    """Ground-truth stand-in for the learned detection head.

    A point scores 1 when it projects validly into the image under ``pose_gt``.
    A pixel scores 1 when its cell contains a valid projection or lies within
    ``radius_px`` cells (Chebyshev) of such a cell.
    """
    uv, valid = project(intrinsics, apply_pose(pose_gt, points))
    d3d = valid.astype(np.float64)
    hit = np.zeros((intrinsics.height, intrinsics.width), dtype=bool)
    cells = pixel_cell_index(uv[valid], intrinsics.width)
    hit.reshape(-1)[cells] = True
    if radius_px > 0:
        from scipy.ndimage import binary_dilation

        hit = binary_dilation(hit, structure=np.ones((2 * radius_px + 1, 2 * radius_px + 1), dtype=bool))
    return IntersectionScores(hit.reshape(-1).astype(np.float64), d3d)


def establish_correspondences(
    sim: np.ndarray,
    pixel_coords: np.ndarray,
    point_coords: np.ndarray,
    mask2d: np.ndarray,
    mask3d: np.ndarray,
) -> CorrespondenceSet:
    """Pair every kept pixel with its most similar kept point.

    Ties go to the smallest point index.
    """
    sim = np.asarray(sim)
    mask2d = np.asarray(mask2d, dtype=bool).reshape(-1)
    mask3d = np.asarray(mask3d, dtype=bool).reshape(-1)
    if sim.shape != (mask2d.size, mask3d.size):
        raise DimensionError(f"similarity {sim.shape} vs masks ({mask2d.size}, {mask3d.size})")
    rows = np.flatnonzero(mask2d)
    cols = np.flatnonzero(mask3d)
    if rows.size == 0 or cols.size == 0:
        raise EmptySetError("no kept pixels or no kept points to match")
    sub = sim[np.ix_(rows, cols)]
    best = np.argmax(sub, axis=1)
    z = cols[best]
    return CorrespondenceSet(
        pixels=np.asarray(pixel_coords, dtype=np.float64)[rows],
        points=np.asarray(point_coords, dtype=np.float64)[z],
        similarity=sub[np.arange(rows.size), best],
        pixel_index=rows,
        point_index=z,
    )


def match_features(
    f2d: np.ndarray,
    f3d: np.ndarray,
    pixel_coords: np.ndarray,
    point_coords: np.ndarray,
    mask2d: np.ndarray,
    mask3d: np.ndarray,
) -> CorrespondenceSet:
    """:func:`establish_correspondences` without materialising the full T x N matrix."""
    mask2d = np.asarray(mask2d, dtype=bool).reshape(-1)
    mask3d = np.asarray(mask3d, dtype=bool).reshape(-1)
    rows = np.flatnonzero(mask2d)
    cols = np.flatnonzero(mask3d)
    if rows.size == 0 or cols.size == 0:
        raise EmptySetError("no kept pixels or no kept points to match")
    sub = similarity_matrix(np.asarray(f2d)[rows], np.asarray(f3d)[cols])
    corrs = establish_correspondences(
        sub,
        np.asarray(pixel_coords)[rows],
        np.asarray(point_coords)[cols],
        np.ones(rows.size, bool),
        np.ones(cols.size, bool),
    )
    return CorrespondenceSet(
        corrs.pixels, corrs.points, corrs.similarity, pixel_index=rows, point_index=cols[corrs.point_index]
    )


def gumbel_st_select(sim_row: np.ndarray, tau: float = DEFAULT_TAU, rng: np.random.Generator | None = None, noise=None):
    """Straight-through Gumbel-softmax selection over the last axis.

    Returns ``(hard, soft)``: ``soft = softmax((sim_row + g) / tau)`` with
    ``g ~ Gumbel(0, 1)`` and ``hard`` the one-hot argmax of ``soft``. The
    forward value of the estimator is ``hard``; its gradient is that of
    ``soft`` (see :func:`gumbel_st_backward`). Pass ``noise`` to override the
    Gumbel draw (zeros give the deterministic argmax).
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    s = np.asarray(sim_row, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("a random generator is required when noise is not given")
        noise = rng.gumbel(size=s.shape)
    soft = softmax((s + noise) / tau, axis=-1)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, np.argmax(soft, axis=-1)[..., None], 1.0, axis=-1)
    return hard, soft


def gumbel_st_backward(soft: np.ndarray, tau: float, grad_out: np.ndarray) -> np.ndarray:
    """Gradient wrt ``sim_row`` given the upstream gradient on the selection.

    Implements ``d(hard + soft - stop_grad(soft))``: only ``soft`` carries
    derivatives, so this is the softmax vector-Jacobian product scaled by 1/tau.
    """
    soft = np.asarray(soft)
    g = np.asarray(grad_out)
    return soft * (g - np.sum(soft * g, axis=-1, keepdims=True)) / tau
