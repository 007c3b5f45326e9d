"""Camera pose merging and interpolation.

Builds the densified per-epoch pose sequences: n poses are slerp/lerp
interpolated into every gap between consecutive captured poses of the same
epoch; the gap between the last before-pose and the first after-pose of the
merged capture list receives no interpolants.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import quat
from .cloudio import atomic_write_text
from .scene import TimeStamp, ValidationError

SLERP_PARALLEL_EPS = 1e-8  # sin(theta) below this falls back to normalized lerp


class SourceTag(Enum):
    CAPTURED = "captured"
    INTERPOLATED = "interpolated"


@dataclass
class Pose:
    """Camera extrinsics: world-to-camera rotation quaternion + translation."""

    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    translation: np.ndarray  # (3,)
    source_tag: SourceTag = SourceTag.CAPTURED

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        n = float(np.linalg.norm(self.rotation))
        if abs(n - 1.0) > 1e-6:
            raise ValidationError(f"pose rotation must be unit-norm, got norm {n}")


@dataclass
class PoseSequence:
    poses: list[Pose]
    epoch: TimeStamp
    n_interp: int = 0

    def __len__(self) -> int:
        return len(self.poses)

    def captured(self) -> list[Pose]:
        return [p for p in self.poses if p.source_tag is SourceTag.CAPTURED]

    def captured_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.poses) if p.source_tag is SourceTag.CAPTURED]


def slerp(q_i: np.ndarray, q_next: np.ndarray, delta: float) -> np.ndarray:
    """Spherical linear interpolation between unit quaternions.

    Shortest arc: q_next is negated when the dot product is negative. Near
    parallel endpoints (sin(theta) < 1e-8) fall back to normalized lerp.
    Endpoints are returned verbatim so recovery at delta 0/1 is exact.
    """
    q_i = np.asarray(q_i, dtype=np.float64)
    q_next = np.asarray(q_next, dtype=np.float64)
    if np.linalg.norm(q_i) == 0.0 or np.linalg.norm(q_next) == 0.0:
        raise ValidationError("slerp endpoints must have nonzero norm")
    if not (0.0 <= delta <= 1.0):
        raise ValidationError(f"interpolation parameter must lie in [0, 1], got {delta}")
    if delta == 0.0:
        return q_i.copy()
    if delta == 1.0:
        return q_next.copy()

    dot = float(np.dot(q_i, q_next))
    if dot < 0.0:
        q_next = -q_next
        dot = -dot
    dot = min(dot, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    if sin_theta < SLERP_PARALLEL_EPS:
        out = (1.0 - delta) * q_i + delta * q_next
    else:
        out = (np.sin((1.0 - delta) * theta) / sin_theta) * q_i + (
            np.sin(delta * theta) / sin_theta
        ) * q_next
    return quat.normalize(out)


def lerp_translation(t_i: np.ndarray, t_next: np.ndarray, delta: float) -> np.ndarray:
    if not (0.0 <= delta <= 1.0):
        raise ValidationError(f"interpolation parameter must lie in [0, 1], got {delta}")
    t_i = np.asarray(t_i, dtype=np.float64)
    t_next = np.asarray(t_next, dtype=np.float64)
    return (1.0 - delta) * t_i + delta * t_next


def interpolate_pose(p_i: Pose, p_next: Pose, delta: float) -> Pose:
    return Pose(
        rotation=slerp(p_i.rotation, p_next.rotation, delta),
        translation=lerp_translation(p_i.translation, p_next.translation, delta),
        source_tag=SourceTag.INTERPOLATED,
    )


def densify(captured: PoseSequence, n: int) -> PoseSequence:
    """Insert n interpolated poses into every gap of a single-epoch sequence.

    Interpolation parameters are j/(n+1) for j = 1..n. A single-pose sequence
    with n > 0 is returned unchanged with a warning.
    """
    if n < 0:
        raise ValidationError("n_interp must be non-negative")
    poses = captured.captured()
    if len(poses) < 2:
        if n > 0 and len(poses) == 1:
            warnings.warn("cannot densify a single-pose sequence; returning it unchanged")
        return PoseSequence(poses=list(poses), epoch=captured.epoch, n_interp=n)
    if n == 0:
        return PoseSequence(poses=list(poses), epoch=captured.epoch, n_interp=0)
    out: list[Pose] = []
    for i in range(len(poses) - 1):
        out.append(poses[i])
        for j in range(1, n + 1):
            out.append(interpolate_pose(poses[i], poses[i + 1], j / (n + 1)))
    out.append(poses[-1])
    return PoseSequence(poses=out, epoch=captured.epoch, n_interp=n)


def densify_merged(
    before: PoseSequence, after: PoseSequence, n: int
) -> tuple[PoseSequence, PoseSequence]:
    """Densify the merged capture list, discarding cross-epoch interpolants.

    Equivalent to interpolating over the concatenation of the two capture
    sets and dropping the poses generated between the last before-pose and
    the first after-pose, which leaves each epoch densified independently.
    """
    return densify(before, n), densify(after, n)


# ---------------------------------------------------------------------------
# Pose file I/O: JSON list of {q, t, epoch[, interpolated]}.


def save_poses(sequences: list[PoseSequence], path: str) -> None:
    records = []
    for seq in sequences:
        for p in seq.poses:
            rec = {
                "q": p.rotation.tolist(),
                "t": p.translation.tolist(),
                "epoch": seq.epoch.value,
            }
            if p.source_tag is SourceTag.INTERPOLATED:
                rec["interpolated"] = True
            records.append(rec)
    atomic_write_text(path, json.dumps(records, indent=1))


def load_poses(path: str) -> dict[TimeStamp, PoseSequence]:
    """Load a pose file, splitting the merged list by epoch."""
    with open(path, "r", encoding="utf-8") as fh:
        records = json.load(fh)
    buckets: dict[TimeStamp, list[Pose]] = {TimeStamp.BEFORE: [], TimeStamp.AFTER: []}
    for i, rec in enumerate(records):
        try:
            epoch = TimeStamp(rec["epoch"])
            tag = SourceTag.INTERPOLATED if rec.get("interpolated") else SourceTag.CAPTURED
            pose = Pose(rotation=np.array(rec["q"]), translation=np.array(rec["t"]), source_tag=tag)
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"pose record {i} in {path!r} is invalid: {exc}") from exc
        buckets[epoch].append(pose)
    return {epoch: PoseSequence(poses=poses, epoch=epoch) for epoch, poses in buckets.items()}
