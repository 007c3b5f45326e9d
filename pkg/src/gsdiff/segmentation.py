"""Instance-ID maps and ID-comparison change detection.

IDs come either from the synthetic oracle (the rasterizer's weight-argmax
instance map, globally consistent by construction) or from externally
produced mask files declared consistent by their manifest. Per pose, the
change set is the symmetric difference of the nonzero ID sets of the two
epochs' renders; the matching instance pixels become the change masks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imageio import read_pgm16
from .rasterizer import FrameBundle
from .scene import TimeStamp, ValidationError

DEFAULT_MIN_PIXELS = 8
DEFAULT_PERSIST_K = 3
MOVED_IOU_THRESHOLD = 0.7


class ContractViolation(ValueError):
    pass


@dataclass
class InstanceFrame:
    """Per-view instance IDs; epoch names the pose trajectory it belongs to."""

    id_map: np.ndarray  # (H, W) uint32, 0 = background
    pose_index: int
    epoch: TimeStamp


@dataclass
class ChangeMask:
    mask: np.ndarray  # (H, W) bool
    pose_index: int
    epoch: TimeStamp


@dataclass
class ChangeMaskSequence:
    masks: list[ChangeMask] = field(default_factory=list)
    epoch: TimeStamp = TimeStamp.BEFORE

    def __len__(self) -> int:
        return len(self.masks)


def oracle_segment(
    bundle: FrameBundle,
    min_pixels: int = DEFAULT_MIN_PIXELS,
    pose_index: int = 0,
    epoch: TimeStamp = TimeStamp.BEFORE,
) -> InstanceFrame:
    """Copy the rasterizer's id_map, zeroing instances below min_pixels."""
    id_map = bundle.id_map.astype(np.uint32).copy()
    ids, counts = np.unique(id_map, return_counts=True)
    for inst, cnt in zip(ids, counts):
        if inst != 0 and cnt < min_pixels:
            id_map[id_map == inst] = 0
    return InstanceFrame(id_map=id_map, pose_index=pose_index, epoch=epoch)


def ingest_masks(
    dir_path: str,
    manifest: dict | str,
    expected_shape: tuple[int, int] | None = None,
    n_poses: dict[TimeStamp, int] | None = None,
) -> list[InstanceFrame]:
    """Load externally produced instance-ID maps (16-bit PGM) per manifest.

    The manifest maps files to (pose_index, epoch) and must declare a
    consistent cross-epoch ID space; consistency itself cannot be verified
    here and is taken on trust.
    """
    if isinstance(manifest, str):
        with open(manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    if manifest.get("id_space") != "consistent":
        raise ValidationError("manifest must declare id_space: consistent")

    frames: list[InstanceFrame] = []
    seen: set[tuple[str, int]] = set()
    for entry in manifest["files"]:
        path = os.path.join(dir_path, entry["path"])
        epoch = TimeStamp(entry["epoch"])
        pose_index = int(entry["pose_index"])
        if not os.path.exists(path):
            raise ValidationError(f"mask file missing: {path}")
        if (epoch.value, pose_index) in seen:
            raise ValidationError(
                f"duplicate pose_index {pose_index} for epoch {epoch.value!r}"
            )
        seen.add((epoch.value, pose_index))
        if n_poses is not None and not (0 <= pose_index < n_poses[epoch]):
            raise ValidationError(
                f"pose_index {pose_index} out of range for epoch {epoch.value!r} "
                f"({n_poses[epoch]} poses)"
            )
        id_map = read_pgm16(path).astype(np.uint32)
        if expected_shape is None:
            expected_shape = id_map.shape
        if id_map.shape != tuple(expected_shape):
            raise ValidationError(
                f"{entry['path']}: dimensions {id_map.shape} do not match "
                f"expected {tuple(expected_shape)}"
            )
        frames.append(InstanceFrame(id_map=id_map, pose_index=pose_index, epoch=epoch))
    return frames


def _nonzero_ids(id_map: np.ndarray) -> set[int]:
    return set(int(i) for i in np.unique(id_map) if i != 0)


def diff_ids(
    before: InstanceFrame,
    after: InstanceFrame,
    moved_iou: float | None = None,
) -> tuple[set[int], ChangeMask, ChangeMask]:
    """Compare the instance-ID sets of two co-posed frames.

    changed = symmetric difference of the nonzero ID sets; background never
    participates. With moved_iou set, an ID present in both frames whose
    pixel-set IoU falls below the threshold also counts as changed.
    """
    if before.pose_index != after.pose_index:
        raise ContractViolation(
            f"diff_ids requires co-posed frames, got pose_index "
            f"{before.pose_index} vs {after.pose_index}"
        )
    if before.id_map.shape != after.id_map.shape:
        raise ContractViolation("diff_ids requires equally sized frames")

    ids_b = _nonzero_ids(before.id_map)
    ids_a = _nonzero_ids(after.id_map)
    changed = ids_b ^ ids_a
    if moved_iou is not None:
        for inst in ids_b & ids_a:
            pb = before.id_map == inst
            pa = after.id_map == inst
            union = np.count_nonzero(pb | pa)
            if union and np.count_nonzero(pb & pa) / union < moved_iou:
                changed.add(inst)

    changed_arr = np.array(sorted(changed), dtype=np.uint32)
    mask_b = np.isin(before.id_map, changed_arr) & (before.id_map != 0)
    mask_a = np.isin(after.id_map, changed_arr) & (after.id_map != 0)
    return (
        changed,
        ChangeMask(mask=mask_b, pose_index=before.pose_index, epoch=before.epoch),
        ChangeMask(mask=mask_a, pose_index=after.pose_index, epoch=after.epoch),
    )


def detect_sequence(
    frames_before: list[InstanceFrame],
    frames_after: list[InstanceFrame],
    persist_k: int = DEFAULT_PERSIST_K,
    moved_iou: float | None = None,
) -> tuple[ChangeMaskSequence, ChangeMaskSequence, set[int]]:
    """Run diff_ids across pose-aligned frame lists.

    frames_before[i] and frames_after[i] are the before- and after-epoch
    renders at the same pose; the frame's own epoch field names the pose
    trajectory, routing its mask into M1 (before trajectory) or M2 (after).
    IDs flagged changed in fewer than persist_k pose pairs are dropped
    everywhere (tracker-flicker suppression).
    """
    if len(frames_before) != len(frames_after):
        raise ContractViolation("frame lists must have equal length")

    per_pose: list[tuple[set[int], InstanceFrame, InstanceFrame]] = []
    counts: dict[int, int] = {}
    for fb, fa in zip(frames_before, frames_after):
        if fb.epoch is not fa.epoch or fb.pose_index != fa.pose_index:
            raise ContractViolation("frame lists must be pose-aligned")
        changed, _, _ = diff_ids(fb, fa, moved_iou=moved_iou)
        per_pose.append((changed, fb, fa))
        for inst in changed:
            counts[inst] = counts.get(inst, 0) + 1

    persistent = {inst for inst, c in counts.items() if c >= persist_k}
    m1 = ChangeMaskSequence(epoch=TimeStamp.BEFORE)
    m2 = ChangeMaskSequence(epoch=TimeStamp.AFTER)
    for changed, fb, fa in per_pose:
        keep = np.array(sorted(changed & persistent), dtype=np.uint32)
        if fb.epoch is TimeStamp.BEFORE:
            mask = np.isin(fb.id_map, keep) & (fb.id_map != 0)
            m1.masks.append(ChangeMask(mask=mask, pose_index=fb.pose_index, epoch=fb.epoch))
        else:
            mask = np.isin(fa.id_map, keep) & (fa.id_map != 0)
            m2.masks.append(ChangeMask(mask=mask, pose_index=fa.pose_index, epoch=fa.epoch))
    return m1, m2, persistent
