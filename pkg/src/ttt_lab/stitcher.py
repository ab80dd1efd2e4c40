"""Composition of per-chunk trajectories and clouds into one global map.

Long sequences are processed in fixed-size chunks, each expressed in
its own local frame with the first pose at the identity.  A chunk's
anchor is the global pose of that first frame; stitching left-multiplies
every local pose (and cloud point) by the anchor.  Consecutive chunks
overlap by exactly one frame: the last frame of chunk k is the first
frame of chunk k+1, which pins each anchor without any optimization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry_metrics import Pose, PointCloud, Trajectory, se3_inverse

__all__ = ["StitchError", "Chunk", "stitch", "split_trajectory"]

# A re-localized chunk must start exactly at its own origin.
_LOCAL_IDENTITY_TOL = 1e-9
# Globalized overlap frames are compared entrywise on rotation and
# translation; disagreement beyond this means the chunks do not share
# the frame they claim to share.
_OVERLAP_TOL = 1e-6


class StitchError(ValueError):
    """Chunks are inconsistent with the overlap-of-one convention."""


@dataclass(frozen=True)
class Chunk:
    """A local trajectory (first pose = identity) with its global anchor."""

    trajectory: Trajectory
    anchor: Pose
    cloud: Optional[PointCloud] = None

    def __post_init__(self):
        first = self.trajectory.poses[0].to_matrix()
        if (np.max(np.abs(first[:3, :3] - np.eye(3))) > _LOCAL_IDENTITY_TOL
                or np.max(np.abs(first[:3, 3])) > _LOCAL_IDENTITY_TOL):
            raise ValueError(
                f"chunk's first pose must be the identity within {_LOCAL_IDENTITY_TOL}"
            )


def _globalize(chunk: Chunk):
    anchor = chunk.anchor.to_matrix()
    mats = [anchor @ p.to_matrix() for p in chunk.trajectory.poses]
    poses = [Pose.from_matrix(p.timestamp, m)
             for p, m in zip(chunk.trajectory.poses, mats)]
    cloud = None
    if chunk.cloud is not None:
        r = anchor[:3, :3]
        pts = chunk.cloud.points @ r.T + anchor[:3, 3]
        nrm = None if chunk.cloud.normals is None else chunk.cloud.normals @ r.T
        cloud = PointCloud(pts, nrm)
    return poses, cloud


def stitch(chunks: Sequence[Chunk], require_overlap: bool = True):
    """Compose chunks into one global trajectory and merged cloud.

    With require_overlap (the default) each chunk after the first must
    re-observe the previous chunk's final frame: its anchor has to
    coincide with that frame's globalized pose within 1e-6, and the
    duplicated frame is dropped from the output.  With
    require_overlap=False the anchors are taken as authoritative and
    nothing is checked or dropped.

    Returns (trajectory, cloud); the cloud is None when no chunk
    carries one.
    """
    chunks = list(chunks)
    if not chunks:
        raise ValueError("need at least one chunk")
    all_poses = []
    all_points = []
    all_normals = []
    have_normals = True
    prev_last = None
    for k, chunk in enumerate(chunks):
        if require_overlap and k > 0:
            anchor = chunk.anchor.to_matrix()
            gap = max(
                float(np.max(np.abs(anchor[:3, :3] - prev_last[:3, :3]))),
                float(np.max(np.abs(anchor[:3, 3] - prev_last[:3, 3]))),
            )
            if gap > _OVERLAP_TOL:
                raise StitchError(
                    f"chunk {k}: anchor disagrees with the previous chunk's final pose "
                    f"by {gap:.3e} (tolerance {_OVERLAP_TOL})"
                )
        poses, cloud = _globalize(chunk)
        prev_last = poses[-1].to_matrix()
        if require_overlap and k > 0:
            poses = poses[1:]
            if not poses:
                raise StitchError(f"chunk {k} has no frames beyond the shared one")
        all_poses.extend(poses)
        if cloud is not None:
            all_points.append(cloud.points)
            if cloud.normals is None:
                have_normals = False
            else:
                all_normals.append(cloud.normals)
    merged = None
    if all_points:
        pts = np.vstack(all_points)
        nrm = np.vstack(all_normals) if (have_normals and all_normals) else None
        merged = PointCloud(pts, nrm)
    return Trajectory(tuple(all_poses)), merged


def split_trajectory(traj: Trajectory, period: int):
    """Cut a global trajectory into overlapping local chunks.

    Chunk k covers global frames [k*period, min((k+1)*period, N-1)]
    inclusive, so consecutive chunks share exactly one frame.  Each
    chunk is re-expressed relative to its first pose, which becomes the
    anchor.  stitch() inverts this exactly (up to rounding).
    """
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    n = len(traj)
    if n < 2:
        raise ValueError("need at least 2 poses to split")
    chunks = []
    start = 0
    while start < n - 1:
        end = min(start + period, n - 1)
        poses = traj.poses[start:end + 1]
        origin_inv = se3_inverse(poses[0].to_matrix())
        local = [Pose.from_matrix(p.timestamp, origin_inv @ p.to_matrix()) for p in poses]
        chunks.append(Chunk(Trajectory(tuple(local)), poses[0]))
        start = end
    return chunks
