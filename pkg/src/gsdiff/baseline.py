"""Naive delta-threshold change detector.

Selects Gaussians whose after-epoch deformation exceeds any of three
thresholds (position offset norm, delta-rotation angle, log-scale offset
norm) and renders just that subset. Exists to demonstrate the documented
failure mode: deltas move collaboratively and single Gaussians can serve
several objects, so no threshold cleanly isolates a changed instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat
from .rasterizer import Camera, render_view
from .scene import GaussianCloud, TimeStamp, ValidationError
from .segmentation import ChangeMask

BASELINE_ALPHA_THRESHOLD = 0.5


@dataclass
class DeltaThresholds:
    pos_thresh: float = 0.1  # world units
    rot_thresh: float = 0.1  # radians
    scale_thresh: float = 0.1  # log-scale units

    def __post_init__(self):
        if self.pos_thresh < 0 or self.rot_thresh < 0 or self.scale_thresh < 0:
            raise ValidationError("delta thresholds must be non-negative")


def filter_by_delta(cloud: GaussianCloud, th: DeltaThresholds) -> np.ndarray:
    """Indices of Gaussians whose after-epoch delta crosses any threshold."""
    tab = cloud.deltas[TimeStamp.AFTER]
    pos_mag = np.linalg.norm(tab.d_position, axis=1)
    scale_mag = np.linalg.norm(tab.d_scale, axis=1)
    norms = np.linalg.norm(tab.d_rotation, axis=1)
    w = np.abs(tab.d_rotation[:, 0]) / np.where(norms > 0, norms, 1.0)
    rot_angle = 2.0 * np.arccos(np.clip(w, -1.0, 1.0))
    selected = (
        (pos_mag > th.pos_thresh)
        | (rot_angle > th.rot_thresh)
        | (scale_mag > th.scale_thresh)
    )
    return np.nonzero(selected)[0]


def cloud_subset(cloud: GaussianCloud, indices: np.ndarray) -> GaussianCloud:
    indices = np.asarray(indices, dtype=np.int64)
    return GaussianCloud(
        positions=cloud.positions[indices],
        scales=cloud.scales[indices],
        rotations=cloud.rotations[indices],
        opacities=cloud.opacities[indices],
        colors=cloud.colors[indices],
        instance_ids=cloud.instance_ids[indices],
        encodings=cloud.encodings[indices],
        deltas={
            t: type(tab)(
                d_position=tab.d_position[indices],
                d_rotation=tab.d_rotation[indices],
                d_scale=tab.d_scale[indices],
            )
            for t, tab in cloud.deltas.items()
        },
        partition=cloud.partition[indices],
    )


def render_baseline_change_map(
    cloud: GaussianCloud,
    selected: np.ndarray,
    t: TimeStamp,
    cam: Camera,
) -> ChangeMask:
    """Rasterize only the selected Gaussians; mask where alpha > 0.5."""
    subset = cloud_subset(cloud, selected)
    bundle = render_view(subset, t, cam)
    return ChangeMask(
        mask=bundle.alpha > BASELINE_ALPHA_THRESHOLD, pose_index=0, epoch=t
    )
