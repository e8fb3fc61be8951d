"""Differentiable forward rendering of Gaussian submaps and its analytic
backward pass.

Forward: each 3D Gaussian is projected to a 2D splat (EWA: the 3D
covariance is pushed through the camera rotation and the projection
Jacobian at the mean), splats are sorted front-to-back by camera-frame
mean depth and alpha-blended per pixel within a 3-sigma bounding box.
Per-pixel contribution records are retained for the backward pass and for
depth-uncertainty bookkeeping.

Backward: chain rule from the blended images through the splat parameters
back to every Gaussian field (mean, rotation, scale, opacity, color) and a
6-vector twist gradient of the camera pose (left-multiplicative
perturbation exp(xi) ∘ pose, ordered [rotation, translation]).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .geometry import CameraIntrinsics, Pose, skew
from .gaussians import GaussianSet

NEAR_PLANE = 0.01
COV2D_REG = 0.3      # px^2 added to the diagonal of every 2D covariance
BBOX_SIGMA = 3.0     # rasterization extent in screen-space std-devs


@dataclass
class Splat2D:
    """One projected Gaussian in pixel space."""

    pixel_mean: np.ndarray   # (2,)
    cov2d: np.ndarray        # (2,2), regularized, positive definite
    depth: float             # camera-frame depth of the mean
    opacity: float
    color: np.ndarray        # (3,)
    source_index: int        # row in the concatenated Gaussian arrays


@dataclass
class ProjectionContext:
    """Everything the backward pass needs to re-walk the forward chain.

    All per-splat arrays are in sorted (front-to-back) order; `indices`
    maps sorted rows back to rows of the concatenated Gaussian arrays.
    """

    n_total: int
    indices: np.ndarray      # (Nv,)
    p0: np.ndarray           # (Nv,2)
    qmat: np.ndarray         # (Nv,3) inverse 2D covariance (qa,qb,qc)
    cov2d: np.ndarray        # (Nv,2,2)
    depths: np.ndarray       # (Nv,)
    opac: np.ndarray         # (Nv,)
    colors: np.ndarray       # (Nv,3)
    m_cam: np.ndarray        # (Nv,3) camera-frame means
    J: np.ndarray            # (Nv,2,3) projection Jacobians
    cov_cam: np.ndarray      # (Nv,3,3) camera-frame 3D covariances
    cov_world: np.ndarray    # (Nv,3,3)
    R_splat: np.ndarray      # (Nv,3,3) rotation of each Gaussian
    quats: np.ndarray        # (Nv,4) raw (pre-normalization) quaternions
    scales: np.ndarray       # (Nv,3)
    R_cam: np.ndarray        # (3,3)


@dataclass
class RenderedFrame:
    """Blended color/depth/alpha plus depth uncertainty and blend records."""

    color: np.ndarray        # (H,W,3) in [0,1]
    depth: np.ndarray        # (H,W) meters
    alpha: np.ndarray        # (H,W) accumulated alpha
    uncertainty: np.ndarray  # (H,W) m^2, zero unless gt depth was supplied
    rec_offsets: Optional[np.ndarray] = None   # (H*W+1,)
    rec_index: Optional[np.ndarray] = None     # (M,) rows into ctx arrays
    rec_alpha: Optional[np.ndarray] = None
    rec_T: Optional[np.ndarray] = None
    ctx: Optional[ProjectionContext] = None

    @property
    def has_records(self) -> bool:
        return self.rec_offsets is not None and self.ctx is not None


@dataclass
class GradientBundle:
    """Loss gradients for every Gaussian field and the camera pose twist."""

    d_means: np.ndarray        # (N,3)
    d_rotations: np.ndarray    # (N,4)
    d_scales: np.ndarray       # (N,3)
    d_opacities: np.ndarray    # (N,)
    d_colors: np.ndarray       # (N,3)
    d_pose: np.ndarray         # (6,) twist [rotation, translation]

    def validate(self) -> None:
        for name, arr in (
            ("d_means", self.d_means), ("d_rotations", self.d_rotations),
            ("d_scales", self.d_scales), ("d_opacities", self.d_opacities),
            ("d_colors", self.d_colors), ("d_pose", self.d_pose),
        ):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite gradient in {name}")


def _concat_submaps(submaps: Sequence) -> GaussianSet:
    merged = GaussianSet()
    for sm in submaps:
        g = sm.gaussians if hasattr(sm, "gaussians") else sm
        if len(g) == 0:
            continue
        merged.append_arrays(g.means, g.rotations, g.scales, g.opacities,
                             g.colors, g.uncertainties, g.owners, g.ids)
    return merged


def _batch_quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N,3,3) of unit quaternions (N,4) (w,x,y,z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def _project_batch(gset: GaussianSet, pose: Pose, K: CameraIntrinsics,
                   require_on_screen: bool = True):
    """EWA-project all Gaussians; cull behind the near plane / off screen.

    Returns a ProjectionContext with splats sorted front-to-back, plus the
    (Nv,4) integer bboxes.
    """
    n = len(gset)
    R_cam = pose.rotation_matrix()
    if n == 0:
        empty = ProjectionContext(
            n_total=0, indices=np.zeros(0, dtype=np.int64),
            p0=np.zeros((0, 2)), qmat=np.zeros((0, 3)), cov2d=np.zeros((0, 2, 2)),
            depths=np.zeros(0), opac=np.zeros(0), colors=np.zeros((0, 3)),
            m_cam=np.zeros((0, 3)), J=np.zeros((0, 2, 3)),
            cov_cam=np.zeros((0, 3, 3)), cov_world=np.zeros((0, 3, 3)),
            R_splat=np.zeros((0, 3, 3)), quats=np.zeros((0, 4)),
            scales=np.zeros((0, 3)), R_cam=R_cam,
        )
        return empty, np.zeros((0, 4), dtype=np.int64)

    m = gset.means @ R_cam.T + pose.translation
    in_front = m[:, 2] > NEAR_PLANE

    quats = gset.rotations
    qn = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    R_splat = _batch_quat_to_matrix(qn)
    # Sigma = R diag(s^2) R^T
    RS = R_splat * gset.scales[:, None, :]
    cov_world = np.einsum("nij,nkj->nik", RS, RS)
    cov_cam = np.einsum("ij,njk,lk->nil", R_cam, cov_world, R_cam)

    z = np.where(in_front, m[:, 2], 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * m[:, 0] / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * m[:, 1] / (z * z)

    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG

    p0 = np.stack(
        [K.fx * m[:, 0] / z + K.cx, K.fy * m[:, 1] / z + K.cy], axis=1
    )

    rx = BBOX_SIGMA * np.sqrt(cov2d[:, 0, 0])
    ry = BBOX_SIGMA * np.sqrt(cov2d[:, 1, 1])
    x0 = np.maximum(np.ceil(p0[:, 0] - rx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(p0[:, 0] + rx), K.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(p0[:, 1] - ry), 0).astype(np.int64)
    y1 = np.minimum(np.floor(p0[:, 1] + ry), K.height - 1).astype(np.int64)
    if require_on_screen:
        # frustum cull with a world-space 3-sigma margin: the planar EWA
        # approximation is meaningless for splats far outside the viewing
        # cone whose footprints only reach the image via J blowing up near
        # the camera plane
        margin = BBOX_SIGMA * gset.scales.max(axis=1)
        in_frustum = (
            (m[:, 0] >= -(K.cx / K.fx) * z - margin)
            & (m[:, 0] <= ((K.width - 1 - K.cx) / K.fx) * z + margin)
            & (m[:, 1] >= -(K.cy / K.fy) * z - margin)
            & (m[:, 1] <= ((K.height - 1 - K.cy) / K.fy) * z + margin)
        )
        visible = in_front & in_frustum & (x0 <= x1) & (y0 <= y1)
    else:
        visible = in_front

    idx = np.nonzero(visible)[0]
    order = np.argsort(m[idx, 2], kind="stable")
    idx = idx[order]

    det = cov2d[idx, 0, 0] * cov2d[idx, 1, 1] - cov2d[idx, 0, 1] ** 2
    qmat = np.stack(
        [cov2d[idx, 1, 1] / det, -cov2d[idx, 0, 1] / det, cov2d[idx, 0, 0] / det],
        axis=1,
    )

    ctx = ProjectionContext(
        n_total=n, indices=idx, p0=np.ascontiguousarray(p0[idx]),
        qmat=np.ascontiguousarray(qmat), cov2d=cov2d[idx],
        depths=np.ascontiguousarray(m[idx, 2]),
        opac=np.ascontiguousarray(gset.opacities[idx]),
        colors=np.ascontiguousarray(gset.colors[idx]),
        m_cam=m[idx], J=J[idx], cov_cam=cov_cam[idx], cov_world=cov_world[idx],
        R_splat=R_splat[idx], quats=quats[idx], scales=gset.scales[idx],
        R_cam=R_cam,
    )
    bboxes = np.ascontiguousarray(np.stack([x0, x1, y0, y1], axis=1)[idx])
    return ctx, bboxes


def project_gaussian(g, pose: Pose, K: CameraIntrinsics) -> Optional[Splat2D]:
    """Project a single Gaussian3D; None when culled by the near plane."""
    gset = GaussianSet()
    gset.append(g, gid=0)
    ctx, _ = _project_batch(gset, pose, K, require_on_screen=False)
    if ctx.indices.size == 0:
        return None
    return Splat2D(
        pixel_mean=ctx.p0[0], cov2d=ctx.cov2d[0], depth=float(ctx.depths[0]),
        opacity=float(ctx.opac[0]), color=ctx.colors[0], source_index=0,
    )


def alpha_at(splat: Splat2D, u: np.ndarray) -> float:
    """Blend weight of a splat at pixel u; 0 below the contribution cutoff."""
    d = np.asarray(u, dtype=np.float64) - splat.pixel_mean
    q = float(d @ np.linalg.solve(splat.cov2d, d))
    a = splat.opacity * np.exp(-0.5 * q)
    a = min(a, kernels.ALPHA_MAX)
    return a if a >= kernels.ALPHA_MIN else 0.0


def render(submaps: Sequence, pose: Pose, K: CameraIntrinsics,
           gt_depth: Optional[np.ndarray] = None) -> RenderedFrame:
    """Alpha-blend all submap Gaussians into a color/depth/alpha frame.

    When gt_depth is given, the per-pixel depth uncertainty (blended
    squared deviation of splat depths from the observed depth) is rendered
    alongside; it is zero elsewhere and at invalid (non-positive) depths.
    """
    gset = _concat_submaps(submaps)
    ctx, bboxes = _project_batch(gset, pose, K)
    H, W = K.height, K.width
    color, depth, alpha, unc, rec_pix, rec_idx, rec_alpha, rec_T = kernels.forward_blend(
        ctx.p0, ctx.qmat, ctx.depths, ctx.opac, ctx.colors, bboxes, H, W, gt_depth
    )
    offsets, rec_idx, rec_alpha, rec_T = kernels.build_pixel_records(
        rec_pix, rec_idx, rec_alpha, rec_T, H * W
    )
    return RenderedFrame(
        color=color, depth=depth, alpha=alpha, uncertainty=unc,
        rec_offsets=offsets, rec_index=rec_idx, rec_alpha=rec_alpha,
        rec_T=rec_T, ctx=ctx,
    )


# Partial derivatives of the quaternion rotation matrix w.r.t. (w,x,y,z).
def _batch_dR_dq(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    d = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    d[:, 0] = 2.0 * np.stack(
        [np.stack([zero, -z, y], 1), np.stack([z, zero, -x], 1), np.stack([-y, x, zero], 1)], 1
    )
    d[:, 1] = 2.0 * np.stack(
        [np.stack([zero, y, z], 1), np.stack([y, -2 * x, -w], 1), np.stack([z, w, -2 * x], 1)], 1
    )
    d[:, 2] = 2.0 * np.stack(
        [np.stack([-2 * y, x, w], 1), np.stack([x, zero, z], 1), np.stack([-w, z, -2 * y], 1)], 1
    )
    d[:, 3] = 2.0 * np.stack(
        [np.stack([-2 * z, -w, x], 1), np.stack([w, -2 * z, y], 1), np.stack([x, y, zero], 1)], 1
    )
    return d


def render_backward(frame: RenderedFrame, dL_dC: np.ndarray, dL_dD: np.ndarray,
                    submaps: Sequence, pose: Pose, K: CameraIntrinsics) -> GradientBundle:
    """Analytic gradients of a scalar loss w.r.t. Gaussian fields and pose.

    `frame` must come from render() with records retained. dL_dC (H,W,3)
    and dL_dD (H,W) are the upstream image gradients. Gradient rows align
    with the concatenation order of `submaps`.
    """
    if not frame.has_records:
        raise ValueError("rendered frame is missing contribution records")
    ctx = frame.ctx
    H, W = K.height, K.width

    g_p0, g_q, g_o, g_c, g_d = kernels.backward_blend(
        frame.rec_offsets, frame.rec_index, frame.rec_alpha, frame.rec_T,
        ctx.p0, ctx.qmat, ctx.depths, ctx.opac, ctx.colors,
        np.ascontiguousarray(dL_dC), np.ascontiguousarray(dL_dD), H, W,
    )

    n_total = ctx.n_total
    out = GradientBundle(
        d_means=np.zeros((n_total, 3)), d_rotations=np.zeros((n_total, 4)),
        d_scales=np.zeros((n_total, 3)), d_opacities=np.zeros(n_total),
        d_colors=np.zeros((n_total, 3)), d_pose=np.zeros(6),
    )
    if ctx.indices.size == 0:
        return out

    fx, fy = K.fx, K.fy
    m = ctx.m_cam
    mx, my, mz = m[:, 0], m[:, 1], m[:, 2]

    # inverse covariance -> 2D covariance
    GQ = np.empty((g_q.shape[0], 2, 2))
    GQ[:, 0, 0] = g_q[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_q[:, 1]
    GQ[:, 1, 1] = g_q[:, 2]
    Q = np.empty_like(GQ)
    Q[:, 0, 0] = ctx.qmat[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = ctx.qmat[:, 1]
    Q[:, 1, 1] = ctx.qmat[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", Q, GQ, Q)

    # 2D covariance -> projection Jacobian and camera-frame covariance
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, ctx.J, ctx.cov_cam)
    g_cov_cam = np.einsum("nji,njk,nkl->nil", ctx.J, g_cov2d, ctx.J)

    # camera-frame mean gradient: pixel mean, splat depth, Jacobian entries
    g_m = np.zeros_like(m)
    g_m[:, 0] = g_p0[:, 0] * fx / mz + g_J[:, 0, 2] * (-fx / mz**2)
    g_m[:, 1] = g_p0[:, 1] * fy / mz + g_J[:, 1, 2] * (-fy / mz**2)
    g_m[:, 2] = (
        -g_p0[:, 0] * fx * mx / mz**2
        - g_p0[:, 1] * fy * my / mz**2
        + g_d
        + g_J[:, 0, 0] * (-fx / mz**2)
        + g_J[:, 1, 1] * (-fy / mz**2)
        + g_J[:, 0, 2] * (2.0 * fx * mx / mz**3)
        + g_J[:, 1, 2] * (2.0 * fy * my / mz**3)
    )

    R_cam = ctx.R_cam
    g_means_v = g_m @ R_cam

    # pose twist: translation and rotation generators
    d_pose = np.zeros(6)
    d_pose[3:] = g_m.sum(axis=0)
    d_pose[:3] = np.cross(m, g_m).sum(axis=0)
    for k, e in enumerate(np.eye(3)):
        Ek = skew(e)
        gen = Ek @ ctx.cov_cam + ctx.cov_cam @ Ek.T
        d_pose[k] += np.einsum("nij,nij->", g_cov_cam, gen)

    # world covariance -> splat rotation and scales
    g_cov_world = np.einsum("ji,njk,kl->nil", R_cam, g_cov_cam, R_cam)
    D = ctx.scales**2
    g_R_splat = 2.0 * np.einsum("nij,njk->nik", g_cov_world, ctx.R_splat * D[:, None, :])
    core = np.einsum("nji,njk,nkl->nil", ctx.R_splat, g_cov_world, ctx.R_splat)
    g_scales_v = 2.0 * ctx.scales * np.einsum("nii->ni", core)

    # splat rotation -> raw quaternion (through normalization)
    qnorm = np.linalg.norm(ctx.quats, axis=1, keepdims=True)
    qn = ctx.quats / qnorm
    dRdq = _batch_dR_dq(qn)
    g_qn = np.einsum("nkij,nij->nk", dRdq, g_R_splat)
    g_quat_v = (g_qn - qn * np.einsum("nk,nk->n", qn, g_qn)[:, None]) / qnorm

    idx = ctx.indices
    out.d_means[idx] = g_means_v
    out.d_rotations[idx] = g_quat_v
    out.d_scales[idx] = g_scales_v
    out.d_opacities[idx] = g_o
    out.d_colors[idx] = g_c
    out.d_pose = d_pose
    out.validate()
    return out


def save_frame_png(frame: RenderedFrame, color_path, depth_path=None) -> None:
    """Debug output: color as 8-bit PNG, depth as 16-bit PNG in millimeters."""
    from PIL import Image

    rgb = np.clip(np.round(frame.color * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(color_path)
    if depth_path is not None:
        dmm = np.clip(np.round(frame.depth * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(dmm, mode="I;16").save(depth_path)
