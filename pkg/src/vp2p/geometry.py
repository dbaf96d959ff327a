"""Rigid poses, pinhole projection and registration error metrics.

Conventions
-----------
* A :class:`Pose` maps points from the LiDAR (world) frame into the camera
  frame: ``X_cam = R @ X + t``.
* Tangent increments are 6-vectors ``[omega, v]`` (rotation first, radians;
  translation second, meters) applied on the left: ``T' = Exp(delta) * T``.
* Pixel ``(u, v)``: ``u`` grows along image columns, ``v`` along rows; a
  projection is valid when it lands in ``[0, width) x [0, height)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Z_MIN = 1e-6
_ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[w]x`` such that ``skew(w) @ x == cross(w, x)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula with a series fallback near zero."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < 1e-12:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    R = np.asarray(R, dtype=np.float64)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * np.linalg.norm(vee)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if s > 1e-7:
        return theta / (2.0 * s) * vee
    if c > 0:
        # near identity: first-order series
        return 0.5 * vee * (1.0 + theta * theta / 6.0)
    # near pi: axis from the symmetric part
    B = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ vee < 0:
        axis = -axis
    return theta * axis


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < 1e-12:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = math.sqrt(theta2)
        b = (1.0 - math.cos(theta)) / theta2
        c = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * K + c * (K @ K)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = math.sqrt(1.0 + tr) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif k == 1:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif k == 2:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_matrix(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``[R | t]`` taking LiDAR-frame points to the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(np.reshape(self.translation, -1))
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose needs a 3x3 rotation and 3-vector translation, got {R.shape} and {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R @ R.T - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    def to_list(self) -> list[float]:
        """12 numbers: row-major rotation followed by translation."""
        return [float(x) for x in self.rotation.reshape(-1)] + [float(x) for x in self.translation]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> Pose:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ValueError(f"pose list needs 12 numbers, got {values.size}")
        return cls(values[:9].reshape(3, 3), values[9:])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def pose_to_json(pose: Pose) -> str:
    return json.dumps(pose.to_list())


def pose_from_json(text: str) -> Pose:
    data = json.loads(text)
    if not isinstance(data, list) or len(data) != 12 or not all(isinstance(x, (int, float)) for x in data):
        raise ValueError("pose JSON must be an array of 12 numbers (row-major R, then t)")
    return Pose.from_list(data)


def pose_to_text(pose: Pose) -> str:
    """4x4 homogeneous matrix, row-major, whitespace separated."""
    rows = pose.as_matrix()
    return "\n".join(" ".join(repr(float(x)) for x in row) for row in rows) + "\n"


def pose_from_text(text: str) -> Pose:
    values = np.array(text.split(), dtype=np.float64)
    if values.size != 16:
        raise ValueError(f"4x4 pose text needs 16 numbers, got {values.size}")
    return Pose.from_matrix(values.reshape(4, 4))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @classmethod
    def kitti_like(cls) -> CameraIntrinsics:
        """KITTI-style camera downsampled to 160x512."""
        return cls(fx=296.0, fy=296.0, cx=256.0, cy=80.0, width=512, height=160)


@dataclass(frozen=True)
class RegistrationError:
    rte: float
    rre: float


def as_points(points) -> np.ndarray:
    """Validate an ``(N, 3)`` point array (N >= 1, all finite)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected an (N, 3) point array with N >= 1, got shape {pts.shape}")
    bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
    if bad.size:
        raise ValueError(f"non-finite coordinates at point index {int(bad[0])}")
    return pts


def apply_pose(pose: Pose, points: np.ndarray) -> np.ndarray:
    pts = as_points(points)
    return pts @ pose.rotation.T + pose.translation


def project(intrinsics: CameraIntrinsics, camera_points: np.ndarray, z_min: float = Z_MIN):
    """Pinhole projection.

    Returns ``(uv, valid)``; ``uv`` rows are NaN where the depth is not above
    ``z_min``. Points landing outside the image keep their coordinates but are
    flagged invalid.
    """
    X = np.asarray(camera_points, dtype=np.float64).reshape(-1, 3)
    z = X[:, 2]
    front = z > z_min
    uv = np.full((X.shape[0], 2), np.nan)
    zf = z[front]
    uv[front, 0] = intrinsics.fx * X[front, 0] / zf + intrinsics.cx
    uv[front, 1] = intrinsics.fy * X[front, 1] / zf + intrinsics.cy
    with np.errstate(invalid="ignore"):
        inside = (uv[:, 0] >= 0) & (uv[:, 0] < intrinsics.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intrinsics.height)
    return uv, front & inside


def se3_exp(delta: np.ndarray) -> Pose:
    delta = np.asarray(delta, dtype=np.float64)
    omega, v = delta[:3], delta[3:]
    return Pose(so3_exp(omega), _left_jacobian(omega) @ v)


def se3_log(pose: Pose) -> np.ndarray:
    omega = so3_log(pose.rotation)
    v = np.linalg.solve(_left_jacobian(omega), pose.translation)
    return np.concatenate([omega, v])


def se3_retract(pose: Pose, delta: np.ndarray) -> Pose:
    """Left-multiplicative update ``Exp(delta) * pose``."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (6,) or not np.all(np.isfinite(delta)):
        raise ValueError("delta must be a finite 6-vector")
    return se3_exp(delta).compose(pose)


def rotation_error_deg(r_pred: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    M = np.asarray(r_pred).T @ np.asarray(r_gt)
    c = 0.5 * (np.trace(M) - 1.0)
    s = 0.5 * math.hypot(M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1])
    # atan2 form equals arccos((tr - 1) / 2) but keeps precision near 0 and 180
    angle = math.degrees(math.atan2(s, c))
    return min(max(angle, 0.0), 180.0)


def translation_error(t_pred: np.ndarray, t_gt: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def registration_error(pred: Pose, gt: Pose) -> RegistrationError:
    return RegistrationError(
        rte=translation_error(pred.translation, gt.translation),
        rre=rotation_error_deg(pred.rotation, gt.rotation),
    )


def registration_accuracy(
    errors: Iterable[RegistrationError], rte_max: float = 2.0, rre_max: float = 5.0
) -> float:
    """Fraction of registrations with ``rte < rte_max`` and ``rre < rre_max``."""
    errors = list(errors)
    if not errors:
        raise ValueError("no registration errors to summarise")
    good = sum(1 for e in errors if e.rte < rte_max and e.rre < rre_max)
    return good / len(errors)
