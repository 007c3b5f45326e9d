"""Classification-encoding training, cloud partitioning and change rendering.

Per-pixel features are linear in the per-Gaussian encodings with fixed
geometry: f_p = sum_i w_pi e_i, where w_pi are the compositing weights the
rasterizer emits. The change head is a 1x1 convolution (per-pixel affine
16 -> 2 classifier), so all gradients of the training loss with respect to
encodings and head parameters are analytic:

* cross-entropy to the detected change masks (averaged over pixels, then
  views), back-propagated through the weight matrices;
* a spatial-consistency term: mean KL divergence between each sampled
  Gaussian's class distribution softmax(head(e)) and those of its k nearest
  neighbors (tie-break by index) in before-epoch space;
* L1 and total-variation image terms, constants here because geometry,
  colors and opacities stay frozen; they are reported for loss-curve
  fidelity and contribute zero gradient.

Training is plain fixed-step gradient descent with a seeded normal init
for the encodings and a zero init for the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .cloudio import HeadData
from .pose_interp import Pose
from .rasterizer import Camera, render_with_weights
from .scene import (
    ENCODING_DIM,
    PARTITION_CHANGED,
    PARTITION_UNCHANGED,
    GaussianCloud,
    TimeStamp,
    ValidationError,
    deform,
)
from .segmentation import ChangeMask, ContractViolation

CLASS_UNCHANGED = 0
CLASS_CHANGED = 1
LOG_FLOOR = 1e-12
ENCODING_INIT_STD = 0.1  # N(0, 0.01): standard deviation 0.1


@dataclass
class ChangeHead:
    """1x1 convolution mapping a 16-d feature to (unchanged, changed) logits."""

    weights: np.ndarray  # (2, 16)
    bias: np.ndarray  # (2,)

    @staticmethod
    def zeros() -> "ChangeHead":
        return ChangeHead(weights=np.zeros((2, ENCODING_DIM)), bias=np.zeros(2))

    @staticmethod
    def from_data(data: HeadData) -> "ChangeHead":
        return ChangeHead(weights=data.weights.copy(), bias=data.bias.copy())

    def to_data(self) -> HeadData:
        return HeadData(weights=self.weights.copy(), bias=self.bias.copy())

    def copy(self) -> "ChangeHead":
        return ChangeHead(weights=self.weights.copy(), bias=self.bias.copy())


@dataclass
class TrainConfig:
    lambda_2d: float = 1.0
    lambda_3d: float = 0.1
    k_neighbors: int = 5
    m_samples: int = 1000
    learning_rate: float = 0.05
    iterations: int = 500
    tv_weight: float = 1.0
    rng_seed: int = 0
    tau: float = 0.5

    def __post_init__(self):
        problems = []
        if self.k_neighbors < 1:
            problems.append("k_neighbors must be >= 1")
        if self.m_samples < 1:
            problems.append("m_samples must be >= 1")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be positive")
        if self.iterations < 0:
            problems.append("iterations must be non-negative")
        if problems:
            raise ValidationError("; ".join(problems))


@dataclass
class ViewPack:
    """Fixed-geometry render data for one training view."""

    weights: sparse.csr_matrix  # (H*W, N) per-pixel compositing weights
    mask: np.ndarray  # (H*W,) bool target labels
    rendered: np.ndarray  # (H, W, 3) rendered color
    target: np.ndarray  # (H, W, 3) input image the render is compared to
    epoch: TimeStamp = TimeStamp.BEFORE
    pose_index: int = 0


@dataclass
class LossBreakdown:
    l1: float
    ltv: float
    l2d: float
    l3d: float

    @property
    def total(self) -> float:
        return self.l1 + self.ltv + self.l2d + self.l3d


@dataclass
class Gradients:
    d_encodings: np.ndarray  # (N, 16)
    d_weights: np.ndarray  # (2, 16)
    d_bias: np.ndarray  # (2,)


def change_logits(features: np.ndarray, head: ChangeHead) -> np.ndarray:
    """Apply the head to a (16, H, W) feature map, returning (2, H, W) logits."""
    if features.shape[0] != ENCODING_DIM:
        raise ContractViolation(f"expected {ENCODING_DIM}-channel features")
    return np.einsum("ck,khw->chw", head.weights, features) + head.bias[:, None, None]


def change_map_from_logits(logits: np.ndarray) -> np.ndarray:
    return logits[CLASS_CHANGED] > logits[CLASS_UNCHANGED]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_2d(logits: np.ndarray, mask: ChangeMask | np.ndarray) -> float:
    """Two-class cross entropy against the mask, averaged over all pixels."""
    target = mask.mask if isinstance(mask, ChangeMask) else mask
    if logits.shape[1:] != target.shape:
        raise ContractViolation(
            f"logits {logits.shape[1:]} do not match mask {target.shape}"
        )
    z = np.moveaxis(logits, 0, -1).reshape(-1, 2)
    logp = np.maximum(_log_softmax(z), np.log(LOG_FLOOR))
    labels = target.reshape(-1).astype(np.int64)
    return float(-logp[np.arange(labels.size), labels].mean())


def knn_indices(positions: np.ndarray, sample_idx: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors (self excluded) per sample, ties broken by index."""
    n = positions.shape[0]
    if k >= n:
        raise ValidationError(f"k_neighbors={k} requires a cloud larger than {k}")
    tree = cKDTree(positions)
    dists, idxs = tree.query(positions[sample_idx], k=k + 1)
    dists = np.atleast_2d(dists)
    idxs = np.atleast_2d(idxs)
    out = np.empty((sample_idx.size, k), dtype=np.int64)
    for row, s in enumerate(sample_idx):
        order = np.lexsort((idxs[row], dists[row]))
        cand = [int(idxs[row][j]) for j in order if int(idxs[row][j]) != int(s)]
        out[row] = cand[:k]
    return out


def _class_distributions(encodings: np.ndarray, head: ChangeHead) -> tuple[np.ndarray, np.ndarray]:
    z = encodings @ head.weights.T + head.bias
    logq = _log_softmax(z)
    return np.exp(logq), logq


def loss_3d(cloud: GaussianCloud, head: ChangeHead, cfg: TrainConfig) -> float:
    value, _, _ = _loss_3d_core(cloud.encodings, head, _neighbor_plan(cloud, cfg))
    return value


@dataclass
class NeighborPlan:
    sample_idx: np.ndarray  # (m,)
    neighbor_idx: np.ndarray  # (m, k)


def _neighbor_plan(cloud: GaussianCloud, cfg: TrainConfig) -> NeighborPlan:
    n = len(cloud)
    if cfg.k_neighbors >= n:
        raise ValidationError(
            f"k_neighbors={cfg.k_neighbors} requires more than {cfg.k_neighbors} Gaussians"
        )
    rng = np.random.default_rng(cfg.rng_seed)
    m = min(cfg.m_samples, n)
    sample_idx = np.sort(rng.choice(n, size=m, replace=False))
    anchors = deform(cloud, TimeStamp.BEFORE).positions
    return NeighborPlan(sample_idx=sample_idx, neighbor_idx=knn_indices(anchors, sample_idx, cfg.k_neighbors))


def _loss_3d_core(
    encodings: np.ndarray, head: ChangeHead, plan: NeighborPlan
) -> tuple[float, np.ndarray, np.ndarray]:
    """Return (loss, dZ accumulated per Gaussian, class distributions q)."""
    q, logq = _class_distributions(encodings, head)
    logq = np.maximum(logq, np.log(LOG_FLOOR))
    m, k = plan.neighbor_idx.shape
    qs = q[plan.sample_idx]  # (m, 2)
    logqs = logq[plan.sample_idx]
    qn = q[plan.neighbor_idx]  # (m, k, 2)
    logqn = logq[plan.neighbor_idx]

    kl = (qs[:, None, :] * (logqs[:, None, :] - logqn)).sum(axis=2)  # (m, k)
    loss = float(kl.mean())

    # dKL/dz_sample = q_s * (log q_s - log q_n - KL); dKL/dz_neighbor = q_n - q_s
    dz = np.zeros_like(q)
    d_sample = (qs[:, None, :] * (logqs[:, None, :] - logqn - kl[:, :, None])).sum(axis=1)
    np.add.at(dz, plan.sample_idx, d_sample / (m * k))
    d_nbr = (qn - qs[:, None, :]) / (m * k)
    np.add.at(dz, plan.neighbor_idx.reshape(-1), d_nbr.reshape(-1, 2))
    return loss, dz, q


def total_variation(image: np.ndarray) -> float:
    """Mean anisotropic total variation over adjacent pixel pairs and channels."""
    dx = np.abs(np.diff(image, axis=1))
    dy = np.abs(np.diff(image, axis=0))
    count = dx.size + dy.size
    if count == 0:
        return 0.0
    return float((dx.sum() + dy.sum()) / count)


def total_loss(
    pack: list[ViewPack],
    cloud: GaussianCloud,
    head: ChangeHead,
    cfg: TrainConfig,
    plan: NeighborPlan | None = None,
) -> tuple[LossBreakdown, Gradients]:
    """Evaluate the combined loss and its analytic gradients.

    Gradients cover every encoding component and head parameter; the L1 and
    TV terms are constants with frozen geometry and contribute none.
    """
    if not pack:
        raise ContractViolation("total_loss needs at least one view")
    n = len(cloud)
    enc = cloud.encodings
    d_enc = np.zeros((n, ENCODING_DIM))
    d_w = np.zeros((2, ENCODING_DIM))
    d_b = np.zeros(2)

    l1_sum = 0.0
    tv_sum = 0.0
    ce_sum = 0.0
    n_views = len(pack)
    for view in pack:
        if view.weights.shape != (view.mask.size, n):
            raise ContractViolation(
                f"weight matrix {view.weights.shape} does not match mask size "
                f"{view.mask.size} and cloud size {n}"
            )
        l1_sum += float(np.abs(view.rendered - view.target).mean())
        tv_sum += cfg.tv_weight * total_variation(view.rendered)

        feats = view.weights @ enc  # (P, 16)
        z = feats @ head.weights.T + head.bias  # (P, 2)
        logp = np.maximum(_log_softmax(z), np.log(LOG_FLOOR))
        labels = view.mask.reshape(-1).astype(np.int64)
        p_count = labels.size
        ce_sum += float(-logp[np.arange(p_count), labels].mean())

        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        onehot[np.arange(p_count), labels] = 1.0
        dz = (soft - onehot) * (cfg.lambda_2d / (p_count * n_views))
        d_w += dz.T @ feats
        d_b += dz.sum(axis=0)
        d_enc += view.weights.T @ (dz @ head.weights)

    l2d = ce_sum / n_views

    if cfg.lambda_3d != 0.0:
        if plan is None:
            plan = _neighbor_plan(cloud, cfg)
        l3d, dz3, _ = _loss_3d_core(enc, head, plan)
        d_w += cfg.lambda_3d * (dz3.T @ enc)
        d_b += cfg.lambda_3d * dz3.sum(axis=0)
        d_enc += cfg.lambda_3d * (dz3 @ head.weights)
    else:
        l3d = 0.0

    breakdown = LossBreakdown(
        l1=l1_sum / n_views,
        ltv=tv_sum / n_views,
        l2d=cfg.lambda_2d * l2d,
        l3d=cfg.lambda_3d * l3d,
    )
    grads = Gradients(d_encodings=d_enc, d_weights=d_w, d_bias=d_b)
    return breakdown, grads


@dataclass
class TrainView:
    """A training view: pose + epoch + its detected change mask."""

    pose: Pose
    epoch: TimeStamp
    mask: np.ndarray  # (H, W) bool
    pose_index: int = 0


@dataclass
class TrainResult:
    cloud: GaussianCloud
    head: ChangeHead
    curve: list[tuple[int, LossBreakdown]] = field(default_factory=list)


def build_render_pack(
    cloud: GaussianCloud,
    views: list[TrainView],
    camera: Camera,
    threads: int = 1,
) -> list[ViewPack]:
    """Render every training view once, capturing the fixed weight matrices."""

    def one(view: TrainView) -> ViewPack:
        cam = camera.with_pose(view.pose)
        bundle, weights = render_with_weights(cloud, view.epoch, cam)
        if view.mask.shape != (cam.height, cam.width):
            raise ContractViolation(
                f"mask shape {view.mask.shape} does not match camera "
                f"({cam.height}, {cam.width})"
            )
        return ViewPack(
            weights=weights,
            mask=view.mask.reshape(-1).copy(),
            rendered=bundle.color,
            target=bundle.color.copy(),
            epoch=view.epoch,
            pose_index=view.pose_index,
        )

    return _ordered_map(one, views, threads)


def _ordered_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def train(
    cloud: GaussianCloud,
    views: list[TrainView],
    camera: Camera,
    cfg: TrainConfig,
    threads: int = 1,
) -> TrainResult:
    """Fixed-step gradient descent over encodings and head.

    Geometry, colors and opacities stay frozen. Returns a copy of the cloud
    with learned encodings, the trained head, and the per-iteration loss
    curve. Divergence (non-finite loss) aborts with a diagnostic.
    """
    if not views:
        raise ContractViolation("training requires at least one view")
    out = cloud.copy()
    rng = np.random.default_rng(cfg.rng_seed)
    out.encodings = rng.normal(0.0, ENCODING_INIT_STD, size=(len(out), ENCODING_DIM))
    head = ChangeHead.zeros()
    pack = build_render_pack(out, views, camera, threads=threads)
    plan = _neighbor_plan(out, cfg) if cfg.lambda_3d != 0.0 else None

    curve: list[tuple[int, LossBreakdown]] = []
    for it in range(cfg.iterations):
        breakdown, grads = total_loss(pack, out, head, cfg, plan=plan)
        if not np.isfinite(breakdown.total):
            raise RuntimeError(
                f"training diverged at iteration {it}: loss={breakdown.total}"
            )
        curve.append((it, breakdown))
        out.encodings -= cfg.learning_rate * grads.d_encodings
        head.weights -= cfg.learning_rate * grads.d_weights
        head.bias -= cfg.learning_rate * grads.d_bias
    if cfg.iterations > 0:
        final, _ = total_loss(pack, out, head, cfg, plan=plan)
        curve.append((cfg.iterations, final))
    return TrainResult(cloud=out, head=head, curve=curve)


def partition_cloud(cloud: GaussianCloud, head: ChangeHead, tau: float = 0.5) -> GaussianCloud:
    """Label each Gaussian changed iff softmax(head(e))[changed] > tau."""
    out = cloud.copy()
    q, _ = _class_distributions(out.encodings, head)
    changed = q[:, CLASS_CHANGED] > tau
    out.partition = np.where(changed, PARTITION_CHANGED, PARTITION_UNCHANGED).astype(np.uint8)
    return out


def render_change_map(
    cloud: GaussianCloud, head: ChangeHead, t: TimeStamp, cam: Camera
) -> ChangeMask:
    """Render the feature map at (t, cam) and classify it per pixel."""
    from .rasterizer import render_view

    bundle = render_view(cloud, t, cam)
    logits = change_logits(bundle.features, head)
    return ChangeMask(mask=change_map_from_logits(logits), pose_index=0, epoch=t)
