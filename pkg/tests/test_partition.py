import numpy as np
import pytest

from gsdiff.partition import (
    ChangeHead,
    Gradients,
    LossBreakdown,
    NeighborPlan,
    TrainConfig,
    TrainView,
    ViewPack,
    build_render_pack,
    change_logits,
    change_map_from_logits,
    knn_indices,
    loss_2d,
    loss_3d,
    partition_cloud,
    render_change_map,
    total_loss,
    total_variation,
    train,
)
from gsdiff.rasterizer import render_with_weights
from gsdiff.scene import PARTITION_CHANGED, PARTITION_UNCHANGED, TimeStamp, ValidationError

from conftest import front_camera, make_cloud, random_cloud


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class TestChangeLogits:
    def test_zero_weights_bias_all_unchanged(self):
        head = ChangeHead(weights=np.zeros((2, 16)), bias=np.array([1.0, 0.0]))
        feats = np.random.default_rng(0).normal(size=(16, 6, 6))
        logits = change_logits(feats, head)
        assert not change_map_from_logits(logits).any()

    def test_zero_feature_gives_bias(self):
        head = ChangeHead(weights=np.ones((2, 16)), bias=np.array([0.3, -0.7]))
        logits = change_logits(np.zeros((16, 1, 1)), head)
        assert np.allclose(logits[:, 0, 0], head.bias)

    def test_separable_encodings_split_regions(self, rng):
        # DERIVED: two constant encodings, head aligned with their difference
        e_changed = rng.normal(size=16)
        e_unchanged = rng.normal(size=16)
        feats = np.zeros((16, 4, 8))
        feats[:, :, :4] = e_unchanged[:, None, None]
        feats[:, :, 4:] = e_changed[:, None, None]
        w = np.zeros((2, 16))
        w[1] = e_changed - e_unchanged
        mid = 0.5 * (w[1] @ (e_changed + e_unchanged))
        head = ChangeHead(weights=w, bias=np.array([mid, 0.0]))
        pred = change_map_from_logits(change_logits(feats, head))
        # per-pixel linear-classification oracle
        for y in range(4):
            for x in range(8):
                f = feats[:, y, x]
                expect = (w[1] @ f + 0.0) > (w[0] @ f + mid)
                assert pred[y, x] == expect
        assert not pred[:, :4].any()
        assert pred[:, 4:].all()


class TestLoss2d:
    def test_saturated_correct_prediction(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[2:, 2:] = True
        logits = np.where(mask[None, :, :], [[[ -40.0]]], [[[40.0]]]) * np.array(
            [1.0, -1.0]
        ).reshape(2, 1, 1)
        assert loss_2d(logits, mask) < 1e-6

    def test_uniform_logits_ln2(self):
        mask = np.zeros((7, 3), dtype=bool)
        mask[0, 0] = True
        logits = np.zeros((2, 7, 3))
        assert loss_2d(logits, mask) == pytest.approx(np.log(2.0), abs=1e-9)

    def test_matches_pixel_loop_oracle(self, rng):
        for _ in range(5):
            logits = rng.normal(size=(2, 6, 9))
            mask = rng.uniform(size=(6, 9)) > 0.5
            expect = 0.0
            for y in range(6):
                for x in range(9):
                    p = softmax(logits[:, y, x])
                    expect += -np.log(p[1] if mask[y, x] else p[0])
            expect /= mask.size
            assert loss_2d(logits, mask) == pytest.approx(expect, abs=1e-9)


class TestLoss3d:
    def test_identical_encodings_zero(self, rng):
        cloud = random_cloud(rng, 12)
        cloud.encodings = np.tile(rng.normal(size=16), (12, 1))
        head = ChangeHead(weights=rng.normal(size=(2, 16)), bias=rng.normal(size=2))
        cfg = TrainConfig(k_neighbors=3, m_samples=12, rng_seed=4)
        assert loss_3d(cloud, head, cfg) == pytest.approx(0.0, abs=1e-15)

    def test_pure_clusters_zero(self, rng):
        positions = np.concatenate(
            [rng.normal(0, 0.05, (8, 3)), rng.normal(0, 0.05, (8, 3)) + 10.0]
        )
        cloud = make_cloud(positions)
        enc = np.zeros((16, 16))
        enc[:8] = rng.normal(size=16)
        enc[8:] = rng.normal(size=16)
        cloud.encodings = enc
        head = ChangeHead(weights=rng.normal(size=(2, 16)), bias=np.zeros(2))
        cfg = TrainConfig(k_neighbors=4, m_samples=16, rng_seed=0)
        assert loss_3d(cloud, head, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_matches_all_pairs_oracle(self, rng):
        # DERIVED: O(n^2) neighbor search + direct KL summation
        n, k = 20, 4
        cloud = random_cloud(rng, n, spread=2.0)
        head = ChangeHead(weights=rng.normal(size=(2, 16)), bias=rng.normal(size=2))
        cfg = TrainConfig(k_neighbors=k, m_samples=n, rng_seed=77)
        got = loss_3d(cloud, head, cfg)

        sample_rng = np.random.default_rng(77)
        samples = np.sort(sample_rng.choice(n, size=n, replace=False))
        pos = cloud.positions
        q = softmax(cloud.encodings @ head.weights.T + head.bias)
        total = 0.0
        for s in samples:
            d = np.linalg.norm(pos - pos[s], axis=1)
            order = sorted(range(n), key=lambda i: (d[i], i))
            nbrs = [i for i in order if i != s][:k]
            for i in nbrs:
                total += float(np.sum(q[s] * (np.log(q[s]) - np.log(q[i]))))
        expect = total / (len(samples) * k)
        assert got == pytest.approx(expect, abs=1e-9)

    def test_k_too_large_rejected(self, rng):
        cloud = random_cloud(rng, 5)
        head = ChangeHead.zeros()
        with pytest.raises(ValidationError):
            loss_3d(cloud, head, TrainConfig(k_neighbors=5, m_samples=5))

    def test_nonnegative(self, rng):
        for seed in range(5):
            cloud = random_cloud(np.random.default_rng(seed), 15)
            head = ChangeHead(
                weights=np.random.default_rng(seed + 1).normal(size=(2, 16)),
                bias=np.zeros(2),
            )
            assert loss_3d(cloud, head, TrainConfig(k_neighbors=3, m_samples=10, rng_seed=seed)) >= 0.0


class TestTotalVariation:
    def test_constant_image_zero(self):
        assert total_variation(np.full((8, 8, 3), 0.4)) == 0.0

    def test_single_step(self):
        img = np.zeros((1, 2, 1))
        img[0, 1, 0] = 1.0
        assert total_variation(img) == pytest.approx(1.0)


def make_pack(rng, cloud, cam, masks):
    views = []
    for i, m in enumerate(masks):
        bundle, weights = render_with_weights(cloud, TimeStamp.BEFORE, cam)
        views.append(
            ViewPack(
                weights=weights,
                mask=m.reshape(-1),
                rendered=bundle.color,
                target=bundle.color.copy(),
                pose_index=i,
            )
        )
    return views


class TestTotalLoss:
    def test_term_isolation(self, rng):
        cam = front_camera(width=8, height=8, focal=10.0)
        cloud = random_cloud(rng, 5, spread=0.3)
        cloud.positions[:, 2] = rng.uniform(1.5, 3.0, 5)
        mask = rng.uniform(size=(8, 8)) > 0.5
        pack = make_pack(rng, cloud, cam, [mask])
        cfg = TrainConfig(lambda_2d=0.0, lambda_3d=0.0, k_neighbors=2, m_samples=5)
        breakdown, grads = total_loss(pack, cloud, ChangeHead.zeros(), cfg)
        assert breakdown.l1 == pytest.approx(0.0, abs=1e-15)
        assert breakdown.total == pytest.approx(
            total_variation(pack[0].rendered), abs=1e-12
        )
        assert np.allclose(grads.d_encodings, 0.0)
        assert np.allclose(grads.d_weights, 0.0)

    def test_gradients_match_finite_differences(self, rng):
        # DERIVED oracle: central differences, h=1e-5, on a 5-Gaussian 8x8 view
        cam = front_camera(width=8, height=8, focal=10.0)
        for trial in range(10):
            trial_rng = np.random.default_rng(1000 + trial)
            cloud = random_cloud(trial_rng, 5, spread=0.3)
            cloud.positions[:, 2] = trial_rng.uniform(1.5, 3.0, 5)
            cloud.encodings = trial_rng.normal(0, 0.5, (5, 16))
            head = ChangeHead(
                weights=trial_rng.normal(0, 0.5, (2, 16)), bias=trial_rng.normal(0, 0.5, 2)
            )
            mask = trial_rng.uniform(size=(8, 8)) > 0.5
            pack = make_pack(trial_rng, cloud, cam, [mask])
            cfg = TrainConfig(
                lambda_2d=float(trial_rng.uniform(0.3, 2.0)),
                lambda_3d=float(trial_rng.uniform(0.05, 0.5)),
                k_neighbors=2,
                m_samples=5,
                rng_seed=trial,
            )
            _, grads = total_loss(pack, cloud, head, cfg)

            h = 1e-5

            def loss_at(enc, w, b):
                c2 = cloud.copy()
                c2.encodings = enc
                breakdown, _ = total_loss(pack, c2, ChangeHead(weights=w, bias=b), cfg)
                return breakdown.total

            def check(analytic, numeric):
                denom = max(abs(analytic), abs(numeric), 1e-3)
                assert abs(analytic - numeric) / denom < 1e-4

            enc = cloud.encodings
            for i in range(5):
                for j in range(0, 16, 5):
                    ep = enc.copy()
                    ep[i, j] += h
                    em = enc.copy()
                    em[i, j] -= h
                    fd = (loss_at(ep, head.weights, head.bias) - loss_at(em, head.weights, head.bias)) / (2 * h)
                    check(grads.d_encodings[i, j], fd)
            for c in range(2):
                for j in range(0, 16, 4):
                    wp = head.weights.copy()
                    wp[c, j] += h
                    wm = head.weights.copy()
                    wm[c, j] -= h
                    fd = (loss_at(enc, wp, head.bias) - loss_at(enc, wm, head.bias)) / (2 * h)
                    check(grads.d_weights[c, j], fd)
                bp = head.bias.copy()
                bp[c] += h
                bm = head.bias.copy()
                bm[c] -= h
                fd = (loss_at(enc, head.weights, bp) - loss_at(enc, head.weights, bm)) / (2 * h)
                check(grads.d_bias[c], fd)


def training_setup(rng, n_views=6, iterations=150):
    """Tiny two-instance scene: one instance removed at the after epoch."""
    from gsdiff.synthetic import (
        InstanceChange,
        SceneSpec,
        default_camera,
        generate_synthetic_scene,
        ring_poses,
    )
    from gsdiff.segmentation import detect_sequence, oracle_segment
    from gsdiff.rasterizer import render_view

    spec = SceneSpec(
        n_instances=2,
        gaussians_per_instance=10,
        n_background=8,
        changes=[InstanceChange(1, "remove")],
    )
    cloud, changed = generate_synthetic_scene(spec, seed=21)
    rig = ring_poses(n_views, radius=4.0, z=2.0)
    cam = default_camera(rig.poses[0], width=48, height=48, focal=80.0)

    views = []
    for i, pose in enumerate(rig.poses):
        c = cam.with_pose(pose)
        fb = oracle_segment(render_view(cloud, TimeStamp.BEFORE, c), 4, i, TimeStamp.BEFORE)
        fa = oracle_segment(render_view(cloud, TimeStamp.AFTER, c), 4, i, TimeStamp.BEFORE)
        _, mb, _ = __import__("gsdiff.segmentation", fromlist=["diff_ids"]).diff_ids(fb, fa)
        views.append(TrainView(pose=pose, epoch=TimeStamp.BEFORE, mask=mb.mask, pose_index=i))
    cfg = TrainConfig(k_neighbors=4, m_samples=50, iterations=iterations, rng_seed=9)
    return cloud, changed, views, cam, cfg


class TestTrain:
    def test_zero_iterations_returns_initial_encodings(self, rng):
        cloud, _, views, cam, cfg = training_setup(rng, n_views=2, iterations=0)
        cfg = TrainConfig(k_neighbors=4, m_samples=50, iterations=0, rng_seed=9)
        result = train(cloud, views, cam, cfg)
        expect = np.random.default_rng(9).normal(0.0, 0.1, (len(cloud), 16))
        assert np.array_equal(result.cloud.encodings, expect)
        assert np.allclose(result.head.weights, 0.0)

    def test_same_seed_identical_curves(self, rng):
        cloud, _, views, cam, cfg = training_setup(rng, n_views=2, iterations=20)
        a = train(cloud, views, cam, cfg)
        b = train(cloud, views, cam, cfg)
        assert len(a.curve) == len(b.curve)
        for (ia, la), (ib, lb) in zip(a.curve, b.curve):
            assert ia == ib and la.total == lb.total

    def test_loss_decreases_and_partitions_instance(self, rng):
        cloud, changed, views, cam, cfg = training_setup(rng, n_views=6, iterations=300)
        result = train(cloud, views, cam, cfg)
        first = result.curve[0][1]
        last = result.curve[-1][1]
        assert last.total < first.total
        assert last.l2d < 0.05

        labeled = partition_cloud(result.cloud, result.head, tau=0.5)
        changed_idx = np.isin(cloud.instance_ids, sorted(changed))
        got_changed = labeled.partition == PARTITION_CHANGED
        agree = (got_changed == changed_idx).mean()
        assert agree > 0.95


class TestPartitionCloud:
    def test_boundary_is_unchanged(self, rng):
        cloud = random_cloud(rng, 4)
        cloud.encodings = np.zeros((4, 16))
        head = ChangeHead.zeros()  # softmax -> exactly 0.5
        labeled = partition_cloud(cloud, head, tau=0.5)
        assert np.all(labeled.partition == PARTITION_UNCHANGED)

    def test_tau_one_all_unchanged(self, rng):
        cloud = random_cloud(rng, 6)
        head = ChangeHead(weights=rng.normal(size=(2, 16)), bias=rng.normal(size=2))
        labeled = partition_cloud(cloud, head, tau=1.0)
        assert np.all(labeled.partition == PARTITION_UNCHANGED)


class TestRenderChangeMap:
    def test_empty_cloud_bias_argmax(self):
        from gsdiff.scene import GaussianCloud

        cam = front_camera(width=6, height=6)
        head = ChangeHead(weights=np.ones((2, 16)), bias=np.array([0.0, 1.0]))
        mask = render_change_map(GaussianCloud.empty(), head, TimeStamp.BEFORE, cam)
        assert mask.mask.all()  # bias favors `changed`

    def test_argmax_invariant_to_common_logit_shift(self, rng):
        cam = front_camera(width=10, height=10, focal=12.0)
        cloud = random_cloud(rng, 6, spread=0.4)
        cloud.positions[:, 2] = rng.uniform(1.5, 3.0, 6)
        head = ChangeHead(weights=rng.normal(size=(2, 16)), bias=rng.normal(size=2))
        shifted = ChangeHead(weights=head.weights.copy(), bias=head.bias + 3.7)
        a = render_change_map(cloud, head, TimeStamp.BEFORE, cam)
        b = render_change_map(cloud, shifted, TimeStamp.BEFORE, cam)
        assert np.array_equal(a.mask, b.mask)
