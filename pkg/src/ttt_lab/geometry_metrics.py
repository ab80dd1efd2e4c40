"""Trajectory, depth and point-cloud evaluation metrics.

Covers the usual reconstruction-benchmark toolbox: timestamp
association between estimated and reference trajectories, closed-form
similarity alignment, absolute and relative trajectory errors, scaled
depth metrics, and nearest-neighbour point-cloud distances.

Conventions: quaternions are stored (w, x, y, z) and unit; poses map
camera/local coordinates into the world frame; depth maps are row-major
with row 0 the top image row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "DegenerateGeometryError",
    "Pose",
    "Trajectory",
    "Sim3Transform",
    "PointCloud",
    "DepthMap",
    "ChamferResult",
    "quat_to_rotmat",
    "rotmat_to_quat",
    "se3_inverse",
    "associate",
    "umeyama_sim3",
    "ate",
    "rpe",
    "depth_metrics",
    "sequence_depth_scale",
    "chamfer",
    "normal_consistency",
]


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine the requested transform."""


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(r) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, with w >= 0.

    Branches on the largest diagonal combination so the divisor stays
    well away from zero for every rotation, including 180-degree ones.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got shape {r.shape}")
    t = r[0, 0] + r[1, 1] + r[2, 2]
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s,
                      0.25 * s,
                      (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s,
                      (r[0, 1] + r[1, 0]) / s,
                      0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s,
                      (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s,
                      0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0 or (q[0] == 0 and next((v for v in q[1:] if v != 0), 1.0) < 0):
        q = -q
    return q


def se3_inverse(t_mat: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid 4x4 transform."""
    r = t_mat[:3, :3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ t_mat[:3, 3]
    return out


@dataclass(frozen=True)
class Pose:
    """A timestamped rigid pose: world point = R p + t."""

    timestamp: float
    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must have 3 components, got shape {t.shape}")
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite entries")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"quaternion must be unit within 1e-9, got norm {norm!r}")
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        q = q / norm
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    def to_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = quat_to_rotmat(self.quat)
        out[:3, 3] = self.translation
        return out

    @classmethod
    def from_matrix(cls, timestamp: float, t_mat: np.ndarray) -> "Pose":
        t_mat = np.asarray(t_mat, dtype=np.float64)
        if t_mat.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got shape {t_mat.shape}")
        return cls(timestamp, rotmat_to_quat(t_mat[:3, :3]), t_mat[:3, 3])


@dataclass(frozen=True)
class Trajectory:
    """A non-empty pose sequence with strictly increasing timestamps."""

    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise ValueError("trajectory must contain at least one pose")
        for a, b in zip(poses, poses[1:]):
            if not (b.timestamp > a.timestamp):
                raise ValueError(
                    f"timestamps must strictly increase, got {a.timestamp!r} then {b.timestamp!r}"
                )
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.poses])

    def translations(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform p -> scale * R p + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if not (self.scale > 0) or not math.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        r = r.copy()
        r.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PointCloud:
    """N >= 1 points, optionally with unit normals."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be a non-empty Nx3 array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite entries")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points shape {pts.shape}"
                )
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must be unit-norm within 1e-6")
            nrm = nrm.copy()
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class DepthMap:
    """Row-major depth image; row 0 is the top row.

    Non-positive and non-finite entries are allowed and mark invalid
    pixels; the metrics decide validity, not the container.
    """

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"depth map must be at least 1x1, got {self.width}x{self.height}")
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim == 1:
            if arr.shape[0] != self.width * self.height:
                raise ValueError(
                    f"flat buffer has {arr.shape[0]} values, expected {self.width * self.height}"
                )
            arr = arr.reshape(self.height, self.width)
        elif arr.shape != (self.height, self.width):
            raise ValueError(
                f"values shape {arr.shape} does not match {self.height}x{self.width}"
            )
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


class ChamferResult(NamedTuple):
    accuracy: float
    completeness: float
    chamfer: float


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """Match poses by nearest timestamp within max_dt, each used once.

    Candidate pairs are taken in order of increasing |dt| (ties broken
    by index), and a pose already matched is skipped.  Returns index
    pairs (i_est, j_gt) sorted by estimated-pose index.
    """
    if not (max_dt > 0):
        raise ValueError(f"max_dt must be positive, got {max_dt}")
    est_ts = est.timestamps()
    gt_ts = gt.timestamps()
    cands = []
    for i, t in enumerate(est_ts):
        lo = int(np.searchsorted(gt_ts, t - max_dt, side="left"))
        hi = int(np.searchsorted(gt_ts, t + max_dt, side="right"))
        for j in range(lo, hi):
            dt = abs(t - gt_ts[j])
            if dt <= max_dt:
                cands.append((dt, i, j))
    cands.sort()
    used_i = set()
    used_j = set()
    pairs = []
    for _, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def umeyama_sim3(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity aligning src onto dst.

    Returns the transform minimizing sum ||s R src_i + t - dst_i||^2 in
    closed form via the SVD of the cross-covariance; the sign matrix on
    the smallest singular direction keeps the solution a proper
    rotation even for reflected inputs.  with_scale False pins s = 1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(
            f"src and dst must be matching Nx3 arrays, got {src.shape} and {dst.shape}"
        )
    n = src.shape[0]
    if n < 3:
        raise ValueError(f"alignment needs at least 3 point pairs, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    x = src - mu_s
    y = dst - mu_d
    cov = y.T @ x / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0 or d[1] <= d[0] * 1e-12:
        raise DegenerateGeometryError(
            "point configuration is rank-deficient (coincident or collinear); rotation is not determined"
        )
    s_mat = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_mat[2, 2] = -1.0
    rot = u @ s_mat @ vt
    if with_scale:
        var_src = float(np.sum(x * x)) / n
        scale = float(np.trace(np.diag(d) @ s_mat)) / var_src
        if not (scale > 0):
            raise DegenerateGeometryError(f"recovered scale {scale} is not positive")
    else:
        scale = 1.0
    t = mu_d - scale * rot @ mu_s
    return Sim3Transform(scale, rot, t)


def ate(est: Trajectory, gt: Trajectory, align: str = "sim3", max_dt: float = 0.02) -> float:
    """Absolute trajectory error: translational RMSE after alignment.

    align selects similarity ("sim3"), rigid ("se3", scale pinned to 1)
    or no alignment ("none").
    """
    if align not in ("sim3", "se3", "none"):
        raise ValueError(f"align must be 'sim3', 'se3' or 'none', got {align!r}")
    pairs = associate(est, gt, max_dt)
    if not pairs:
        raise ValueError("no matched pose pairs within the association window")
    p = est.translations()[[i for i, _ in pairs]]
    g = gt.translations()[[j for _, j in pairs]]
    if align != "none":
        if len(pairs) < 3:
            raise ValueError(
                f"alignment needs at least 3 matched pairs, got {len(pairs)}"
            )
        p = umeyama_sim3(p, g, with_scale=(align == "sim3")).apply(p)
    return float(np.sqrt(np.mean(np.sum((p - g) ** 2, axis=1))))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1, max_dt: float = 0.02):
    """Relative pose error over matched pairs delta steps apart.

    For each matched index i the residual motion is
    E = (gt_i^-1 gt_{i+delta})^-1 (est_i^-1 est_{i+delta}); returns the
    RMSE of the translation norms and of the rotation angles in
    degrees.
    """
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    pairs = associate(est, gt, max_dt)
    if len(pairs) < delta + 1:
        raise ValueError(
            f"need at least delta+1 = {delta + 1} matched pairs, got {len(pairs)}"
        )
    est_mats = [est.poses[i].to_matrix() for i, _ in pairs]
    gt_mats = [gt.poses[j].to_matrix() for _, j in pairs]
    trans_sq = []
    rot_sq = []
    for i in range(len(pairs) - delta):
        gt_rel = se3_inverse(gt_mats[i]) @ gt_mats[i + delta]
        est_rel = se3_inverse(est_mats[i]) @ est_mats[i + delta]
        err = se3_inverse(gt_rel) @ est_rel
        trans_sq.append(float(np.sum(err[:3, 3] ** 2)))
        cos_angle = (np.trace(err[:3, :3]) - 1.0) / 2.0
        angle = math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
        rot_sq.append(angle * angle)
    return float(np.sqrt(np.mean(trans_sq))), float(np.sqrt(np.mean(rot_sq)))


def _valid_mask(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.isfinite(pred) & (pred > 0) & np.isfinite(gt) & (gt > 0)


def depth_metrics(pred: DepthMap, gt: DepthMap, mode: str = "metric",
                  scale: Optional[float] = None):
    """Mean absolute relative error and the delta < 1.25 inlier fraction.

    mode "metric" compares raw values; mode "per_sequence_scale"
    multiplies the prediction by `scale`, or by median(gt)/median(pred)
    over this map's valid pixels when no scale is given.  Pixels are
    valid where both maps are finite and positive.
    """
    if mode not in ("metric", "per_sequence_scale"):
        raise ValueError(f"mode must be 'metric' or 'per_sequence_scale', got {mode!r}")
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError(
            f"depth map sizes differ: {pred.width}x{pred.height} vs {gt.width}x{gt.height}"
        )
    mask = _valid_mask(pred.values, gt.values)
    if not np.any(mask):
        raise ValueError("no valid pixels shared by prediction and reference")
    p = pred.values[mask]
    g = gt.values[mask]
    if mode == "metric":
        if scale is not None:
            raise ValueError("scale only applies in per_sequence_scale mode")
        s = 1.0
    else:
        if scale is None:
            s = float(np.median(g) / np.median(p))
        else:
            s = float(scale)
        if not (s > 0) or not math.isfinite(s):
            raise ValueError(f"scale must be positive and finite, got {s}")
    p = p * s
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    delta_125 = float(np.mean(ratio < 1.25))
    return abs_rel, delta_125


def sequence_depth_scale(preds: Sequence[DepthMap], gts: Sequence[DepthMap]) -> float:
    """One shared scale for a sequence: median(gt) / median(pred).

    Medians are taken over the valid pixels pooled across all frames,
    so a single scale serves every map of the sequence.
    """
    if len(preds) != len(gts) or not preds:
        raise ValueError(
            f"need matching non-empty map lists, got {len(preds)} and {len(gts)}"
        )
    p_all = []
    g_all = []
    for pred, gt in zip(preds, gts):
        if (pred.width, pred.height) != (gt.width, gt.height):
            raise ValueError("depth map sizes differ within the sequence")
        mask = _valid_mask(pred.values, gt.values)
        p_all.append(pred.values[mask])
        g_all.append(gt.values[mask])
    p_all = np.concatenate(p_all)
    g_all = np.concatenate(g_all)
    if p_all.size == 0:
        raise ValueError("no valid pixels in the whole sequence")
    return float(np.median(g_all) / np.median(p_all))


def chamfer(a: PointCloud, b: PointCloud) -> ChamferResult:
    """Symmetric nearest-neighbour distance between two clouds.

    accuracy is the mean distance from each point of `a` to its nearest
    neighbour in `b`, completeness the reverse, and chamfer their
    average.  Euclidean (not squared) distances throughout.
    """
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    acc = float(np.mean(d_ab))
    comp = float(np.mean(d_ba))
    return ChamferResult(acc, comp, 0.5 * (acc + comp))


def normal_consistency(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean |n_i . n_match| over nearest-neighbour matches.

    Both clouds must carry normals.  The absolute value makes the
    measure orientation-agnostic; 1.0 means perfectly parallel normals.
    """
    if a.normals is None or b.normals is None:
        raise ValueError("normal consistency needs normals on both clouds")
    _, idx_ab = cKDTree(b.points).query(a.points)
    _, idx_ba = cKDTree(a.points).query(b.points)
    ab = float(np.mean(np.abs(np.sum(a.normals * b.normals[idx_ab], axis=1))))
    ba = float(np.mean(np.abs(np.sum(b.normals * a.normals[idx_ba], axis=1))))
    return 0.5 * (ab + ba)
