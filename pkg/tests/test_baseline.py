import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdiff import quat
from gsdiff.baseline import DeltaThresholds, cloud_subset, filter_by_delta, render_baseline_change_map
from gsdiff.scene import TimeStamp, ValidationError
from gsdiff.synthetic import (
    InstanceChange,
    SceneSpec,
    default_camera,
    generate_synthetic_scene,
    ring_poses,
)

from conftest import make_cloud, random_cloud


class TestFilterByDelta:
    def test_zero_deltas_empty(self, rng):
        cloud = random_cloud(rng, 8)
        assert filter_by_delta(cloud, DeltaThresholds()).size == 0

    def test_position_threshold_crossing(self, rng):
        cloud = random_cloud(rng, 4)
        cloud.deltas[TimeStamp.AFTER].d_position[2] = [0.3, 0.4, 0.0]  # norm 0.5
        got = filter_by_delta(cloud, DeltaThresholds(pos_thresh=0.1, rot_thresh=10, scale_thresh=10))
        assert got.tolist() == [2]

    def test_matches_predicate_oracle(self, rng):
        for _ in range(10):
            n = 15
            cloud = random_cloud(rng, n)
            tab = cloud.deltas[TimeStamp.AFTER]
            tab.d_position = rng.normal(0, 0.2, (n, 3))
            tab.d_scale = rng.normal(0, 0.2, (n, 3))
            angles = rng.uniform(0, np.pi, n)
            axes = rng.normal(size=(n, 3))
            tab.d_rotation = np.array(
                [quat.from_axis_angle(axes[i], angles[i]) for i in range(n)]
            )
            th = DeltaThresholds(
                pos_thresh=float(rng.uniform(0, 0.5)),
                rot_thresh=float(rng.uniform(0, np.pi)),
                scale_thresh=float(rng.uniform(0, 0.5)),
            )
            got = set(filter_by_delta(cloud, th).tolist())
            expect = set()
            for i in range(n):
                pos = np.linalg.norm(tab.d_position[i]) > th.pos_thresh
                rot = quat.rotation_angle(tab.d_rotation[i]) > th.rot_thresh
                sc = np.linalg.norm(tab.d_scale[i]) > th.scale_thresh
                if pos or rot or sc:
                    expect.add(i)
            assert got == expect

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_monotonic_in_thresholds(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 10)
        cloud.deltas[TimeStamp.AFTER].d_position = rng.normal(0, 0.3, (10, 3))
        cloud.deltas[TimeStamp.AFTER].d_scale = rng.normal(0, 0.3, (10, 3))
        lo = DeltaThresholds(0.05, 0.05, 0.05)
        hi = DeltaThresholds(0.2, 0.05, 0.05)
        assert set(filter_by_delta(cloud, hi).tolist()) <= set(filter_by_delta(cloud, lo).tolist())

    def test_negative_thresholds_rejected(self):
        with pytest.raises(ValidationError):
            DeltaThresholds(pos_thresh=-1.0)


class TestBaselineRender:
    def test_empty_selection_all_false(self, rng):
        cloud = random_cloud(rng, 6)
        cloud.positions[:, 2] += 3.0
        from conftest import front_camera

        cam = front_camera()
        mask = render_baseline_change_map(cloud, np.array([], dtype=int), TimeStamp.BEFORE, cam)
        assert not mask.mask.any()

    def test_whole_instance_selection_matches_silhouette(self):
        # DERIVED end-to-end: selecting exactly the changed instance's
        # Gaussians reproduces its ground-truth silhouette (IoU > 0.9).
        spec = SceneSpec(
            n_instances=3,
            gaussians_per_instance=20,
            n_background=12,
            changes=[InstanceChange(1, "remove")],
        )
        cloud, changed = generate_synthetic_scene(spec, seed=13)
        rig = ring_poses(4, radius=4.0, z=2.0)
        ious = []
        for pose in rig.poses:
            cam = default_camera(pose)
            from gsdiff.rasterizer import render_view

            full = render_view(cloud, TimeStamp.BEFORE, cam)
            gt = np.isin(full.id_map, sorted(changed))
            selected = np.nonzero(np.isin(cloud.instance_ids, sorted(changed)))[0]
            mask = render_baseline_change_map(cloud, selected, TimeStamp.BEFORE, cam)
            inter = np.count_nonzero(mask.mask & gt)
            union = np.count_nonzero(mask.mask | gt)
            ious.append(inter / union)
        assert np.mean(ious) > 0.9

    def test_adversarial_scene_bleeds_into_unchanged_region(self):
        # the shared bar passes the delta filter and renders over pixels of
        # the unchanged instance region
        spec = SceneSpec(
            n_instances=2,
            gaussians_per_instance=15,
            n_background=10,
            changes=[InstanceChange(1, "remove")],
            shared_gaussian=True,
        )
        cloud, changed = generate_synthetic_scene(spec, seed=4)
        selected = filter_by_delta(cloud, DeltaThresholds(0.05, 10.0, 10.0))
        assert len(cloud) - 1 in set(selected.tolist())  # bar selected

        rig = ring_poses(6, radius=4.0, z=2.0)
        from gsdiff.rasterizer import render_view

        bleed = 0
        for pose in rig.poses:
            cam = default_camera(pose)
            full = render_view(cloud, TimeStamp.BEFORE, cam)
            unchanged_region = full.id_map == 2
            mask = render_baseline_change_map(cloud, selected, TimeStamp.BEFORE, cam)
            bleed += np.count_nonzero(mask.mask & unchanged_region)
        assert bleed > 0

    def test_subset_preserves_attributes(self, rng):
        cloud = random_cloud(rng, 9)
        sub = cloud_subset(cloud, np.array([2, 5]))
        assert len(sub) == 2
        assert np.array_equal(sub.positions, cloud.positions[[2, 5]])
        assert np.array_equal(sub.instance_ids, cloud.instance_ids[[2, 5]])
