"""Deformable Gaussian scene representation.

A cloud stores per-Gaussian attributes as column arrays plus two per-epoch
delta tables (position offset, incremental rotation, log-scale offset).
`deform` evaluates the cloud geometry at one of the two capture epochs;
clouds are treated as immutable after construction except through the
training entry points in :mod:`gsdiff.partition`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import quat

ENCODING_DIM = 16

# Partition labels stored per Gaussian (u8 in the container format).
PARTITION_UNASSIGNED = 0
PARTITION_UNCHANGED = 1
PARTITION_CHANGED = 2


class TimeStamp(enum.Enum):
    BEFORE = "before"
    AFTER = "after"


class ValidationError(ValueError):
    """Raised when a scene object violates its invariants."""


class ConfigurationError(ValueError):
    """Raised when a requested table or option is missing."""


@dataclass
class Gaussian:
    """Single-Gaussian view, mainly for construction and fixtures."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    instance_id: int = 0
    class_encoding: np.ndarray = field(default_factory=lambda: np.zeros(ENCODING_DIM))


@dataclass
class DeformationDelta:
    """Per-Gaussian deformation: additive position, multiplicative rotation,
    additive log-scale. The zero delta (0, identity, 0) is the identity."""

    d_position: np.ndarray
    d_rotation: np.ndarray
    d_scale: np.ndarray

    @staticmethod
    def zero() -> "DeformationDelta":
        return DeformationDelta(np.zeros(3), quat.identity(), np.zeros(3))


@dataclass
class DeltaTable:
    """Column layout of one epoch's deltas for all Gaussians."""

    d_position: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 4) quaternion increments
    d_scale: np.ndarray  # (N, 3) log-scale offsets

    @staticmethod
    def zeros(n: int) -> "DeltaTable":
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return DeltaTable(np.zeros((n, 3)), rot, np.zeros((n, 3)))

    def copy(self) -> "DeltaTable":
        return DeltaTable(self.d_position.copy(), self.d_rotation.copy(), self.d_scale.copy())


@dataclass
class GaussianCloud:
    """Scene representation: attribute columns + per-epoch delta tables."""

    positions: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3) strictly positive
    rotations: np.ndarray  # (N, 4) unit quaternions
    opacities: np.ndarray  # (N,) in [0, 1]
    colors: np.ndarray  # (N, 3) in [0, 1]
    instance_ids: np.ndarray  # (N,) uint32, 0 = background
    encodings: np.ndarray  # (N, 16)
    deltas: dict[TimeStamp, DeltaTable]
    partition: np.ndarray  # (N,) uint8 partition labels

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            instance_id=int(self.instance_ids[i]),
            class_encoding=self.encodings[i].copy(),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            scales=self.scales.copy(),
            rotations=self.rotations.copy(),
            opacities=self.opacities.copy(),
            colors=self.colors.copy(),
            instance_ids=self.instance_ids.copy(),
            encodings=self.encodings.copy(),
            deltas={t: tab.copy() for t, tab in self.deltas.items()},
            partition=self.partition.copy(),
        )

    @staticmethod
    def empty() -> "GaussianCloud":
        return GaussianCloud.from_columns(
            positions=np.zeros((0, 3)),
            scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacities=np.zeros(0),
            colors=np.zeros((0, 3)),
        )

    @staticmethod
    def from_columns(
        positions: np.ndarray,
        scales: np.ndarray,
        rotations: np.ndarray,
        opacities: np.ndarray,
        colors: np.ndarray,
        instance_ids: np.ndarray | None = None,
        encodings: np.ndarray | None = None,
        deltas: dict[TimeStamp, DeltaTable] | None = None,
        partition: np.ndarray | None = None,
    ) -> "GaussianCloud":
        n = positions.shape[0]
        if instance_ids is None:
            instance_ids = np.zeros(n, dtype=np.uint32)
        if encodings is None:
            encodings = np.zeros((n, ENCODING_DIM))
        if deltas is None:
            deltas = {TimeStamp.BEFORE: DeltaTable.zeros(n), TimeStamp.AFTER: DeltaTable.zeros(n)}
        if partition is None:
            partition = np.full(n, PARTITION_UNASSIGNED, dtype=np.uint8)
        cloud = GaussianCloud(
            positions=np.asarray(positions, dtype=np.float64).reshape(n, 3),
            scales=np.asarray(scales, dtype=np.float64).reshape(n, 3),
            rotations=np.asarray(rotations, dtype=np.float64).reshape(n, 4),
            opacities=np.asarray(opacities, dtype=np.float64).reshape(n),
            colors=np.asarray(colors, dtype=np.float64).reshape(n, 3),
            instance_ids=np.asarray(instance_ids, dtype=np.uint32).reshape(n),
            encodings=np.asarray(encodings, dtype=np.float64).reshape(n, ENCODING_DIM),
            deltas=deltas,
            partition=np.asarray(partition, dtype=np.uint8).reshape(n),
        )
        validate_cloud(cloud)
        return cloud

    @staticmethod
    def from_gaussians(
        gaussians: list[Gaussian],
        deltas: dict[TimeStamp, DeltaTable] | None = None,
    ) -> "GaussianCloud":
        n = len(gaussians)
        return GaussianCloud.from_columns(
            positions=np.array([g.position for g in gaussians]).reshape(n, 3),
            scales=np.array([g.scale for g in gaussians]).reshape(n, 3),
            rotations=np.array([g.rotation for g in gaussians]).reshape(n, 4),
            opacities=np.array([g.opacity for g in gaussians]).reshape(n),
            colors=np.array([g.color for g in gaussians]).reshape(n, 3),
            instance_ids=np.array([g.instance_id for g in gaussians], dtype=np.uint32).reshape(n),
            encodings=np.array([g.class_encoding for g in gaussians]).reshape(n, ENCODING_DIM),
            deltas=deltas,
        )


def validate_cloud(cloud: GaussianCloud) -> None:
    """Check the cloud invariants, raising ValidationError on the first hit."""
    n = len(cloud)
    if n > 0:
        norms = np.linalg.norm(cloud.rotations, axis=1)
        if not np.all(np.abs(norms - 1.0) <= quat.UNIT_NORM_TOL):
            raise ValidationError("rotation quaternions must be unit-norm within 1e-9")
        if not np.all(cloud.scales > 0):
            raise ValidationError("scale components must be strictly positive")
        if np.any(cloud.opacities < 0) or np.any(cloud.opacities > 1):
            raise ValidationError("opacity must lie in [0, 1]")
        if np.any(cloud.colors < 0) or np.any(cloud.colors > 1):
            raise ValidationError("color components must lie in [0, 1]")
    if cloud.encodings.shape != (n, ENCODING_DIM):
        raise ValidationError(f"class encodings must be {ENCODING_DIM}-dimensional")
    if cloud.partition.shape != (n,):
        raise ValidationError("partition length must equal gaussian count")
    for t in (TimeStamp.BEFORE, TimeStamp.AFTER):
        if t not in cloud.deltas:
            raise ConfigurationError(f"missing delta table for epoch {t.value!r}")
        tab = cloud.deltas[t]
        if tab.d_position.shape != (n, 3) or tab.d_rotation.shape != (n, 4) or tab.d_scale.shape != (n, 3):
            raise ValidationError(f"delta table for {t.value!r} does not match gaussian count")


def deform(cloud: GaussianCloud, t: TimeStamp) -> GaussianCloud:
    """Evaluate the cloud geometry at epoch ``t``.

    position + d_position; rotation left-composed with the normalized
    d_rotation; scale multiplied by exp(d_scale). Encodings, opacity, color
    and IDs pass through untouched. Pure: the input cloud is never mutated.
    """
    if t not in cloud.deltas:
        raise ConfigurationError(f"no delta table for epoch {t.value!r}")
    tab = cloud.deltas[t]
    n = len(cloud)
    if n == 0:
        return cloud.copy()
    norms = np.linalg.norm(tab.d_rotation, axis=1)
    if np.any(norms == 0):
        raise ValidationError("delta rotations must have nonzero norm")
    d_rot = tab.d_rotation / norms[:, None]
    return GaussianCloud(
        positions=cloud.positions + tab.d_position,
        scales=cloud.scales * np.exp(tab.d_scale),
        rotations=quat.multiply_batch(d_rot, cloud.rotations),
        opacities=cloud.opacities.copy(),
        colors=cloud.colors.copy(),
        instance_ids=cloud.instance_ids.copy(),
        encodings=cloud.encodings.copy(),
        deltas={k: v.copy() for k, v in cloud.deltas.items()},
        partition=cloud.partition.copy(),
    )
