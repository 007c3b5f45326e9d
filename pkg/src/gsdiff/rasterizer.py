"""Depth-ordered alpha-compositing splat renderer.

Per view it produces a color image, alpha map, depth map, instance-ID map
(argmax of compositing weight, the synthetic stand-in for a tracker) and the
16-channel classification feature map composited exactly like color.

Projection is the standard EWA-style splatting: world covariance
R diag(s^2) R^T is pushed through the camera rotation and the perspective
Jacobian, plus a 0.3 px^2 isotropic floor. Pixel centers sit at integer
coordinates; pose convention is world-to-camera (x_cam = R x_world + T)
with the camera looking along +z.

Rendering walks splats front to back in a single global depth order
(ties broken by Gaussian index), accumulating over each splat's clipped
bounding box; a pixel stops accumulating once its transmittance drops
below 1e-4. The same walk can emit the per-pixel per-Gaussian weight
matrix used for analytic gradients during partition training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .scene import ENCODING_DIM, GaussianCloud, TimeStamp, ValidationError, deform
from .pose_interp import Pose
from . import quat

ALPHA_CLAMP = 0.99
TRANSMITTANCE_CUTOFF = 1e-4
COV2D_FLOOR = 0.3  # px^2 isotropic floor on the projected covariance
CULL_SIGMA = 3.0  # off-screen culling uses the 3-sigma footprint
EVAL_SIGMA = 6.0  # per-splat evaluation radius; exp(-18) leaves no visible tail


@dataclass
class Camera:
    """Pinhole camera: pose + intrinsics in pixels."""

    pose: Pose
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("camera image must have positive area")
        if not (0 < self.near < self.far):
            raise ValidationError("camera depth range requires 0 < near < far")

    def with_pose(self, pose: Pose) -> "Camera":
        return Camera(
            pose=pose,
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
            near=self.near,
            far=self.far,
        )


@dataclass
class SplatList:
    """Projected splats sorted by ascending view depth, index tie-break."""

    indices: np.ndarray  # (M,) gaussian indices into the source cloud
    means2d: np.ndarray  # (M, 2) projected centers, (x, y) pixel coords
    cov2d: np.ndarray  # (M, 2, 2) projected covariance
    depths: np.ndarray  # (M,) view-space z

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass
class FrameBundle:
    """One rendered view."""

    color: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W), +inf where nothing rendered
    id_map: np.ndarray  # (H, W) uint32 instance ids, 0 = background
    features: np.ndarray  # (16, H, W) composited classification features


def project(cloud: GaussianCloud, t: TimeStamp, cam: Camera) -> SplatList:
    """Deform the cloud at epoch t and project it into the camera.

    Culls Gaussians in front of the near plane and those whose 3-sigma
    screen footprint misses the image entirely.
    """
    deformed = deform(cloud, t)
    n = len(deformed)
    if n == 0:
        return _empty_splats()

    rot = quat.to_matrix(cam.pose.rotation)
    x_cam = deformed.positions @ rot.T + cam.pose.translation

    z = x_cam[:, 2]
    keep = z > cam.near
    if not np.any(keep):
        return _empty_splats()
    idx = np.nonzero(keep)[0]
    xc = x_cam[idx]
    z = xc[:, 2]

    u = cam.fx * xc[:, 0] / z + cam.cx
    v = cam.fy * xc[:, 1] / z + cam.cy

    # World covariance R diag(s^2) R^T, rotated into the camera frame.
    rmats = quat.to_matrix_batch(deformed.rotations[idx])
    s2 = deformed.scales[idx] ** 2
    cov_world = np.einsum("nij,nj,nkj->nik", rmats, s2, rmats)
    cov_cam = np.einsum("ij,njk,lk->nil", rot, cov_world, rot)

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * xc[:, 0] / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * xc[:, 1] / z**2
    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    sigma_max = np.sqrt(_max_eigenvalue_2x2(cov2d))
    r_cull = CULL_SIGMA * sigma_max
    on_screen = (
        (u + r_cull >= -0.5)
        & (u - r_cull <= cam.width - 0.5)
        & (v + r_cull >= -0.5)
        & (v - r_cull <= cam.height - 0.5)
    )
    idx = idx[on_screen]
    if idx.size == 0:
        return _empty_splats()
    u, v, z, cov2d = u[on_screen], v[on_screen], z[on_screen], cov2d[on_screen]

    order = np.lexsort((idx, z))
    return SplatList(
        indices=idx[order].astype(np.int64),
        means2d=np.stack([u, v], axis=1)[order],
        cov2d=cov2d[order],
        depths=z[order],
    )


def _empty_splats() -> SplatList:
    return SplatList(
        indices=np.zeros(0, dtype=np.int64),
        means2d=np.zeros((0, 2)),
        cov2d=np.zeros((0, 2, 2)),
        depths=np.zeros(0),
    )


def _max_eigenvalue_2x2(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return mid + disc


def composite(
    splats: SplatList,
    cloud: GaussianCloud,
    cam: Camera,
    early_termination: bool = True,
) -> FrameBundle:
    bundle, _ = _composite_core(splats, cloud, cam, early_termination, collect_weights=False)
    return bundle


def composite_with_weights(
    splats: SplatList, cloud: GaussianCloud, cam: Camera
) -> tuple[FrameBundle, sparse.csr_matrix]:
    """Composite and also return the (H*W, N) per-pixel weight matrix.

    Row p of the matrix holds w_i for every Gaussian i contributing to pixel
    p, so features flatten to ``weights @ encodings`` and the same weights
    back-propagate pixel gradients onto encodings.
    """
    return _composite_core(splats, cloud, cam, early_termination=True, collect_weights=True)


def _composite_core(
    splats: SplatList,
    cloud: GaussianCloud,
    cam: Camera,
    early_termination: bool,
    collect_weights: bool,
) -> tuple[FrameBundle, sparse.csr_matrix | None]:
    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    feat = np.zeros((h, w, ENCODING_DIM))
    alpha = np.zeros((h, w))
    depth_num = np.zeros((h, w))
    transmit = np.ones((h, w))
    w_max = np.zeros((h, w))
    id_map = np.zeros((h, w), dtype=np.uint32)

    rows_w: list[np.ndarray] = []
    cols_w: list[np.ndarray] = []
    vals_w: list[np.ndarray] = []

    sigma_max = np.sqrt(_max_eigenvalue_2x2(splats.cov2d)) if len(splats) else np.zeros(0)
    conics = _invert_2x2(splats.cov2d) if len(splats) else np.zeros((0, 2, 2))

    for s in range(len(splats)):
        gi = int(splats.indices[s])
        mx, my = splats.means2d[s]
        r = EVAL_SIGMA * sigma_max[s]
        x0 = max(int(np.ceil(mx - r)), 0)
        x1 = min(int(np.floor(mx + r)), w - 1)
        y0 = max(int(np.ceil(my - r)), 0)
        y1 = min(int(np.floor(my + r)), h - 1)
        if x0 > x1 or y0 > y1:
            continue

        xs = np.arange(x0, x1 + 1) - mx
        ys = np.arange(y0, y1 + 1) - my
        ca, cb, cc = conics[s, 0, 0], conics[s, 0, 1], conics[s, 1, 1]
        quad = (
            ca * xs[None, :] ** 2
            + 2.0 * cb * ys[:, None] * xs[None, :]
            + cc * ys[:, None] ** 2
        )
        a = np.minimum(cloud.opacities[gi] * np.exp(-0.5 * quad), ALPHA_CLAMP)

        box = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        t_box = transmit[box]
        if early_termination:
            active = t_box >= TRANSMITTANCE_CUTOFF
            weight = np.where(active, t_box * a, 0.0)
            transmit[box] = np.where(active, t_box * (1.0 - a), t_box)
        else:
            weight = t_box * a
            transmit[box] = t_box * (1.0 - a)

        color[box] += weight[:, :, None] * cloud.colors[gi]
        feat[box] += weight[:, :, None] * cloud.encodings[gi]
        alpha[box] += weight
        depth_num[box] += weight * splats.depths[s]

        gained = weight > w_max[box]
        w_max[box] = np.where(gained, weight, w_max[box])
        ids_box = id_map[box]
        ids_box[gained] = cloud.instance_ids[gi]
        id_map[box] = ids_box

        if collect_weights:
            nz = np.nonzero(weight)
            if nz[0].size:
                rows_w.append((nz[0] + y0) * w + (nz[1] + x0))
                cols_w.append(np.full(nz[0].size, gi, dtype=np.int64))
                vals_w.append(weight[nz])

    with np.errstate(invalid="ignore"):
        depth = np.where(alpha > 0, depth_num / np.where(alpha > 0, alpha, 1.0), np.inf)

    bundle = FrameBundle(
        color=color,
        alpha=alpha,
        depth=depth,
        id_map=id_map,
        features=np.moveaxis(feat, 2, 0),
    )
    weights = None
    if collect_weights:
        if rows_w:
            weights = sparse.csr_matrix(
                (np.concatenate(vals_w), (np.concatenate(rows_w), np.concatenate(cols_w))),
                shape=(h * w, len(cloud)),
            )
        else:
            weights = sparse.csr_matrix((h * w, len(cloud)))
    return bundle, weights


def _invert_2x2(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    return inv


def render_view(
    cloud: GaussianCloud, t: TimeStamp, cam: Camera, early_termination: bool = True
) -> FrameBundle:
    """deform -> project -> composite; deterministic for identical inputs."""
    return composite(project(cloud, t, cam), cloud, cam, early_termination=early_termination)


def render_with_weights(
    cloud: GaussianCloud, t: TimeStamp, cam: Camera
) -> tuple[FrameBundle, sparse.csr_matrix]:
    return composite_with_weights(project(cloud, t, cam), cloud, cam)
