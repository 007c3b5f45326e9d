"""Synthetic scene generation with ground-truth instance and change labels.

Scenes are built from disjoint instance clusters on a ring around the
origin, over a floor of large background Gaussians, viewed by camera rings
at positive elevation. Changes are expressed purely through the two-epoch
delta tables:

* ``remove``: the instance translates far out of every camera's frustum at
  the after epoch.
* ``add``: the instance sits out of frustum at the before epoch and in
  place at the after epoch.
* ``move``: modeled the way an ID tracker sees it, as a remove of the
  original ID plus an add of a twin instance (fresh ID) at the shifted
  location.

The adversarial flag appends one elongated background Gaussian spanning a
changed and an unchanged instance region, sharing the changed instance's
delta; it is always the last Gaussian in the cloud.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from . import quat
from .pose_interp import Pose, PoseSequence, SourceTag
from .rasterizer import Camera
from .scene import (
    DeltaTable,
    GaussianCloud,
    TimeStamp,
    ValidationError,
)

REMOVAL_OFFSET = np.array([0.0, 0.0, 120.0])  # straight up, behind every rig camera


@dataclass
class InstanceChange:
    instance_id: int  # 1-based instance ID
    kind: str = "remove"  # remove | add | move
    move_offset: tuple[float, float, float] = (0.5, 0.4, 0.0)


@dataclass
class SceneSpec:
    n_instances: int
    gaussians_per_instance: int = 25
    n_background: int = 50
    changes: list[InstanceChange] = field(default_factory=list)
    shared_gaussian: bool = False
    instance_ring_radius: float = 0.9
    cluster_std: float = 0.16
    instance_scale_range: tuple[float, float] = (0.07, 0.11)
    instance_opacity_range: tuple[float, float] = (0.85, 0.97)
    floor_z: float = -0.55
    floor_radius: float = 2.8
    floor_scale_range: tuple[float, float] | None = None  # None: sized from blob spacing
    floor_opacity_range: tuple[float, float] = (0.85, 0.95)


def generate_synthetic_scene(spec: SceneSpec, seed: int) -> tuple[GaussianCloud, set[int]]:
    """Build a labeled cloud; deterministic for a fixed (spec, seed)."""
    _validate_spec(spec)
    rng = np.random.default_rng(seed)

    positions, scales, rotations, opacities, colors, ids = [], [], [], [], [], []
    d_pos = {TimeStamp.BEFORE: [], TimeStamp.AFTER: []}

    changes = {c.instance_id: c for c in spec.changes}
    changed_ids: set[int] = set()
    twin_id = spec.n_instances + 1
    centers = _instance_centers(spec, rng)

    instance_jobs: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []
    # (instance_id, center, before_offset, after_offset)
    zero = np.zeros(3)
    for inst in range(1, spec.n_instances + 1):
        center = centers[inst - 1]
        change = changes.get(inst)
        if change is None:
            instance_jobs.append((inst, center, zero, zero))
            continue
        changed_ids.add(inst)
        if change.kind == "remove":
            instance_jobs.append((inst, center, zero, REMOVAL_OFFSET))
        elif change.kind == "add":
            instance_jobs.append((inst, center, REMOVAL_OFFSET, zero))
        elif change.kind == "move":
            instance_jobs.append((inst, center, zero, REMOVAL_OFFSET))
            twin_center = center + np.asarray(change.move_offset)
            instance_jobs.append((twin_id, twin_center, REMOVAL_OFFSET, zero))
            changed_ids.add(twin_id)
            twin_id += 1
        else:
            raise ValidationError(f"unknown change kind {change.kind!r}")

    for inst, center, off_b, off_a in instance_jobs:
        color = _instance_color(inst)
        for _ in range(spec.gaussians_per_instance):
            positions.append(center + rng.normal(0.0, spec.cluster_std, 3) * [1, 1, 0.55])
            scales.append(rng.uniform(*spec.instance_scale_range, 3))
            rotations.append(_random_rotation(rng))
            opacities.append(rng.uniform(*spec.instance_opacity_range))
            colors.append(np.clip(color + rng.normal(0, 0.03, 3), 0, 1))
            ids.append(inst)
            d_pos[TimeStamp.BEFORE].append(off_b)
            d_pos[TimeStamp.AFTER].append(off_a)

    # Sunflower-spiral floor: even coverage for any blob count, scales tied
    # to the spacing so instance fringes always have a solid backdrop.
    golden = np.pi * (3.0 - np.sqrt(5.0))
    spacing = spec.floor_radius * np.sqrt(np.pi / spec.n_background)
    for i in range(spec.n_background):
        r = spec.floor_radius * np.sqrt((i + 0.5) / spec.n_background)
        phi = i * golden
        positions.append(
            np.array([r * np.cos(phi), r * np.sin(phi), spec.floor_z + rng.normal(0, 0.02)])
        )
        if spec.floor_scale_range is None:
            s = 0.8 * spacing * rng.uniform(0.95, 1.15)
        else:
            s = rng.uniform(*spec.floor_scale_range)
        scales.append(np.array([s, s, max(s * 0.25, 0.02)]))
        rotations.append(quat.identity())
        opacities.append(rng.uniform(*spec.floor_opacity_range))
        grey = rng.uniform(0.35, 0.6)
        colors.append(np.clip([grey, grey, grey + rng.uniform(-0.05, 0.1)], 0, 1))
        ids.append(0)
        d_pos[TimeStamp.BEFORE].append(zero)
        d_pos[TimeStamp.AFTER].append(zero)

    if spec.shared_gaussian:
        bar = _shared_bar(spec, centers, changes, rng)
        positions.append(bar["position"])
        scales.append(bar["scale"])
        rotations.append(bar["rotation"])
        opacities.append(bar["opacity"])
        colors.append(bar["color"])
        ids.append(0)
        d_pos[TimeStamp.BEFORE].append(bar["off_before"])
        d_pos[TimeStamp.AFTER].append(bar["off_after"])

    n = len(positions)
    deltas = {
        t: DeltaTable(
            d_position=np.asarray(d_pos[t], dtype=np.float64).reshape(n, 3),
            d_rotation=np.tile(quat.identity(), (n, 1)),
            d_scale=np.zeros((n, 3)),
        )
        for t in (TimeStamp.BEFORE, TimeStamp.AFTER)
    }
    cloud = GaussianCloud.from_columns(
        positions=np.asarray(positions),
        scales=np.asarray(scales),
        rotations=np.asarray(rotations),
        opacities=np.asarray(opacities),
        colors=np.asarray(colors),
        instance_ids=np.asarray(ids, dtype=np.uint32),
        deltas=deltas,
    )
    return cloud, changed_ids


def _validate_spec(spec: SceneSpec) -> None:
    problems = []
    if spec.n_instances < 1:
        problems.append("need at least one instance")
    if spec.gaussians_per_instance < 1:
        problems.append("need at least one Gaussian per instance")
    if spec.n_background < 1:
        problems.append("need at least one background blob")
    for c in spec.changes:
        if not (1 <= c.instance_id <= spec.n_instances):
            problems.append(f"change references unknown instance {c.instance_id}")
    if spec.shared_gaussian:
        if not spec.changes:
            problems.append("shared-Gaussian scene needs at least one changed instance")
        if spec.n_instances < 2:
            problems.append("shared-Gaussian scene needs an unchanged neighbor instance")
    if problems:
        raise ValidationError("; ".join(problems))


def _instance_centers(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.n_instances) / max(spec.n_instances, 1)
    angles = angles + rng.uniform(-0.08, 0.08, spec.n_instances)
    r = spec.instance_ring_radius
    centers = np.stack(
        [r * np.cos(angles), r * np.sin(angles), rng.uniform(-0.05, 0.05, spec.n_instances)],
        axis=1,
    )
    return centers


def _instance_color(inst: int) -> np.ndarray:
    hue = (inst * 0.61803398875) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.9))


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(0, 1, 4)
    return quat.normalize(q)


def _shared_bar(
    spec: SceneSpec,
    centers: np.ndarray,
    changes: dict[int, InstanceChange],
    rng: np.random.Generator,
) -> dict:
    """Elongated background Gaussian between a changed and an unchanged center,
    sharing the changed instance's after-epoch delta so no delta threshold
    separates it from the truly changed Gaussians."""
    changed_inst = min(changes)
    unchanged_inst = min(i for i in range(1, spec.n_instances + 1) if i not in changes)
    a = centers[changed_inst - 1]
    b = centers[unchanged_inst - 1]
    mid = 0.5 * (a + b)
    mid[2] -= 0.22  # sit below the instances so they stay in front
    axis = b - a
    length = float(np.linalg.norm(axis))
    direction = axis / length

    # Rotation taking local +x to the bar direction.
    x = np.array([1.0, 0.0, 0.0])
    v = np.cross(x, direction)
    s = float(np.linalg.norm(v))
    c = float(np.dot(x, direction))
    if s < 1e-12:
        rot = quat.identity() if c > 0 else quat.from_axis_angle([0, 0, 1], np.pi)
    else:
        rot = quat.from_axis_angle(v / s, float(np.arctan2(s, c)))

    change = changes[changed_inst]
    if change.kind == "add":
        off_b, off_a = REMOVAL_OFFSET, np.zeros(3)
    else:
        off_b, off_a = np.zeros(3), REMOVAL_OFFSET

    return {
        "position": mid,
        "scale": np.array([0.62 * length, 0.07, 0.05]),
        "rotation": rot,
        "opacity": 0.93,
        "color": np.array([0.75, 0.68, 0.3]),
        "off_before": off_b,
        "off_after": off_a,
    }


# ---------------------------------------------------------------------------
# Camera rigs.


def look_at_pose(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(forward, up / np.linalg.norm(up)))) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Pose(rotation=quat.from_matrix(rot), translation=-rot @ center)


def ring_poses(
    n: int,
    radius: float,
    z: float,
    phase: float = 0.0,
    target=(0.0, 0.0, 0.0),
    epoch: TimeStamp = TimeStamp.BEFORE,
) -> PoseSequence:
    poses = []
    for k in range(n):
        angle = phase + 2 * np.pi * k / n
        center = np.array([radius * np.cos(angle), radius * np.sin(angle), z])
        pose = look_at_pose(center, np.asarray(target, dtype=np.float64))
        pose.source_tag = SourceTag.CAPTURED
        poses.append(pose)
    return PoseSequence(poses=poses, epoch=epoch)


def default_camera(
    pose: Pose,
    width: int = 64,
    height: int = 64,
    focal: float = 110.0,
    near: float = 0.1,
    far: float = 200.0,
) -> Camera:
    return Camera(
        pose=pose,
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        near=near,
        far=far,
    )
