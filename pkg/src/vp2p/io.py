"""On-disk formats: point clouds, features, scores, correspondences, poses, posteriors."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import Pose, pose_from_json, pose_to_json
from .matching import CorrespondenceSet, IntersectionScores

FEATURE_MAGIC = b"VP2PFEAT"
SCORES_MAGIC = b"VP2PSCOR"
_HEADER = struct.Struct("<8sIII")
CORR_COLUMNS = ["u", "v", "x", "y", "z", "similarity"]
POSTERIOR_COLUMNS = ["qw", "qx", "qy", "qz", "tx", "ty", "tz", "log_weight"]


def cloud_to_bytes(points: np.ndarray) -> bytes:
    """KITTI-style records: little-endian float32 ``x, y, z, reflectance=0``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rec = np.zeros((pts.shape[0], 4), dtype="<f4")
    rec[:, :3] = pts
    return rec.tobytes()


def write_cloud_bin(path, points: np.ndarray) -> None:
    Path(path).write_bytes(cloud_to_bytes(points))


def read_cloud_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 16:
        raise ParseError(f"{path}: size {len(raw)} is not a positive multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(rec)):
        raise ParseError(f"{path}: non-finite coordinates")
    return rec[:, :3].astype(np.float64)


def _pack(magic: bytes, T: int, N: int, C: int, *blocks: np.ndarray) -> bytes:
    body = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks)
    return _HEADER.pack(magic, T, N, C) + body


def _unpack(raw: bytes, magic: bytes, path):
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    got, T, N, C = _HEADER.unpack_from(raw)
    if got != magic:
        raise ParseError(f"{path}: bad magic {got!r}, expected {magic!r}")
    return T, N, C, raw[_HEADER.size :]


def features_to_bytes(f2d: np.ndarray, f3d: np.ndarray) -> bytes:
    f2d = np.asarray(f2d)
    f3d = np.asarray(f3d)
    if f2d.ndim != 2 or f3d.ndim != 2 or f2d.shape[1] != f3d.shape[1]:
        raise ValueError("pixel and point features must be 2D with the same channel count")
    return _pack(FEATURE_MAGIC, f2d.shape[0], f3d.shape[0], f2d.shape[1], f2d, f3d)


def write_features(path, f2d: np.ndarray, f3d: np.ndarray) -> None:
    Path(path).write_bytes(features_to_bytes(f2d, f3d))


def read_features(path):
    """Returns ``(f2d, f3d)`` as float32 arrays."""
    T, N, C, body = _unpack(Path(path).read_bytes(), FEATURE_MAGIC, path)
    if len(body) != 4 * C * (T + N):
        raise ParseError(f"{path}: expected {4 * C * (T + N)} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4")
    return data[: T * C].reshape(T, C).copy(), data[T * C :].reshape(N, C).copy()


def write_scores(path, scores: IntersectionScores) -> None:
    Path(path).write_bytes(_pack(SCORES_MAGIC, scores.d2d.size, scores.d3d.size, 1, scores.d2d, scores.d3d))


def read_scores(path) -> IntersectionScores:
    T, N, _, body = _unpack(Path(path).read_bytes(), SCORES_MAGIC, path)
    if len(body) != 4 * (T + N):
        raise ParseError(f"{path}: expected {4 * (T + N)} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    try:
        return IntersectionScores(data[:T], data[T:])
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def correspondences_to_csv(corrs: CorrespondenceSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CORR_COLUMNS)
    for (u, v), (x, y, z), s in zip(corrs.pixels, corrs.points, corrs.similarity):
        w.writerow([repr(float(a)) for a in (u, v, x, y, z, s)])
    return buf.getvalue()


def correspondences_from_csv(text: str, source="<string>") -> CorrespondenceSet:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CORR_COLUMNS:
        raise ParseError(f"{source}: expected header {','.join(CORR_COLUMNS)}, got {header}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CORR_COLUMNS):
            raise ParseError(f"{source}:{lineno}: expected {len(CORR_COLUMNS)} fields, got {len(row)}")
        try:
            rows.append([float(x) for x in row])
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: {exc}") from exc
    data = np.array(rows, dtype=np.float64).reshape(-1, 6)
    if not np.all(np.isfinite(data)):
        raise ParseError(f"{source}: non-finite values")
    return CorrespondenceSet(data[:, :2], data[:, 2:5], data[:, 5])


def write_correspondences(path, corrs: CorrespondenceSet) -> None:
    Path(path).write_text(correspondences_to_csv(corrs))


def read_correspondences(path) -> CorrespondenceSet:
    return correspondences_from_csv(Path(path).read_text(), source=path)


def write_pose(path, pose: Pose) -> None:
    Path(path).write_text(pose_to_json(pose) + "\n")


def read_pose(path) -> Pose:
    try:
        return pose_from_json(Path(path).read_text())
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def posterior_to_csv(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSTERIOR_COLUMNS)
    for pose, lw in zip(samples.samples, samples.log_weights):
        w.writerow([repr(float(a)) for a in (*pose.quaternion(), *pose.translation, lw)])
    return buf.getvalue()


def _finite_or_null(obj):
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    return obj


def dump_json(data) -> str:
    """Strict JSON: sorted keys, non-finite floats written as null."""
    return json.dumps(_finite_or_null(data), indent=2, sort_keys=True, allow_nan=False) + "\n"
