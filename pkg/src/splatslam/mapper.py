"""Submap lifecycle and optimization.

Submaps of 3D Gaussians grow one keyframe at a time: a densification mask
(low accumulated alpha or high render error) spawns new splats from
backprojected depth, per-splat depth uncertainty is refreshed from the
pixels each splat dominates, and an uncertainty-driven greedy schedule
picks which keyframes supervise each optimization iteration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .gaussians import UNSEEN_UNCERTAINTY, GaussianSet
from .geometry import CameraIntrinsics, Pose, se3_compose, se3_inverse
from .optim import Adam
from .render import NEAR_PLANE, RenderedFrame, render, render_backward
from .ssim import ssim_with_grad

SUBMAP_MAGIC = b"GLCS"
SUBMAP_VERSION = 1


@dataclass
class Keyframe:
    id: int
    frame_index: int
    pose: Pose
    color: np.ndarray
    depth: np.ndarray
    descriptor: np.ndarray
    observed_ids: Set[int] = field(default_factory=set)
    is_global: bool = False
    timestamp: float = 0.0


@dataclass
class Submap:
    id: int
    anchor_keyframe_id: int
    gaussians: GaussianSet = field(default_factory=GaussianSet)
    keyframe_ids: List[int] = field(default_factory=list)
    active: bool = True


class WorldMap:
    """All submaps and keyframes plus the global Gaussian id counter."""

    def __init__(self):
        self.submaps: List[Submap] = []
        self.keyframes: Dict[int, Keyframe] = {}
        self.next_gaussian_id = 0
        self.next_keyframe_id = 0

    @property
    def active_submap(self) -> Optional[Submap]:
        for sm in self.submaps:
            if sm.active:
                return sm
        return None

    def new_submap(self, anchor_keyframe_id: int) -> Submap:
        for sm in self.submaps:
            sm.active = False
        sm = Submap(id=len(self.submaps), anchor_keyframe_id=anchor_keyframe_id)
        self.submaps.append(sm)
        return sm

    def add_keyframe(self, kf: Keyframe) -> None:
        self.keyframes[kf.id] = kf

    def member_keyframes(self, submap: Submap) -> List[Keyframe]:
        return [self.keyframes[i] for i in submap.keyframe_ids]

    def take_gaussian_ids(self, count: int) -> np.ndarray:
        ids = np.arange(self.next_gaussian_id, self.next_gaussian_id + count, dtype=np.int64)
        self.next_gaussian_id += count
        return ids

    def drop_gaussian_ids(self, ids: Iterable[int]) -> None:
        dropped = set(int(i) for i in ids)
        if not dropped:
            return
        for kf in self.keyframes.values():
            kf.observed_ids -= dropped


@dataclass
class MapperConfig:
    densify_alpha_threshold: float = 0.6       # alpha_thre
    keyframe_overlap_threshold: float = 0.90
    new_submap_translation: float = 0.5        # meters
    new_submap_rotation_deg: float = 30.0
    keyframes_per_optimization: int = 5        # k
    iterations_per_optimization: int = 100
    lambda_color: float = 1.0
    lambda_depth: float = 1.0
    lambda_reg: float = 1.0
    ssim_mix: float = 0.2                      # lambda inside the color loss
    prune_opacity: float = 0.1
    nn_radius: float = 0.01                    # 1 cm voxel
    depth_error_multiplier: float = 50.0
    color_error_threshold: float = 0.1
    max_points_per_keyframe: int = 5000
    min_scale: float = 0.001
    max_scale: float = 0.05
    new_opacity: float = 0.5
    depth_loss_eps: float = 1e-6
    depth_loss_alpha_min: float = 0.5
    lr_means: float = 1e-3                     # scaled by submap extent
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3                    # on log-scale
    lr_opacities: float = 5e-2                 # on logit-opacity
    lr_colors: float = 2.5e-3

    def __post_init__(self):
        if self.keyframes_per_optimization < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.densify_alpha_threshold <= 1.0:
            raise ValueError("densify alpha threshold out of range")
        if not 0.0 < self.keyframe_overlap_threshold <= 1.0:
            raise ValueError("keyframe overlap threshold out of range")


def frame_overlap(a: Keyframe, b: Keyframe) -> float:
    """Jaccard ratio of the observed-Gaussian id sets (0 when both empty)."""
    union = a.observed_ids | b.observed_ids
    if not union:
        return 0.0
    return len(a.observed_ids & b.observed_ids) / len(union)


def observed_gaussians(pose: Pose, K: CameraIntrinsics, submaps: Sequence[Submap]) -> Set[int]:
    """Ids of Gaussians whose mean projects inside the image, in front of
    the near plane, with above-cutoff alpha at its own projected center."""
    out: Set[int] = set()
    R = pose.rotation_matrix()
    for sm in submaps:
        g = sm.gaussians
        if len(g) == 0:
            continue
        m = g.means @ R.T + pose.translation
        z = m[:, 2]
        in_front = z > NEAR_PLANE
        zs = np.where(in_front, z, 1.0)
        u = K.fx * m[:, 0] / zs + K.cx
        v = K.fy * m[:, 1] / zs + K.cy
        alpha0 = np.minimum(g.opacities, kernels.ALPHA_MAX)
        ok = (
            in_front
            & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
            & (alpha0 >= kernels.ALPHA_MIN)
        )
        out.update(int(i) for i in g.ids[ok])
    return out


def maybe_insert_keyframe(current_observed: Set[int], last_keyframe: Optional[Keyframe],
                          cfg: MapperConfig) -> bool:
    """Insert when overlap with the last keyframe drops below threshold."""
    if last_keyframe is None:
        return True
    union = current_observed | last_keyframe.observed_ids
    r_o = len(current_observed & last_keyframe.observed_ids) / len(union) if union else 0.0
    return r_o < cfg.keyframe_overlap_threshold


def maybe_new_submap(current_pose: Pose, anchor_pose: Pose, cfg: MapperConfig) -> bool:
    """New submap when camera motion from the anchor exceeds thresholds."""
    c_cur = se3_inverse(current_pose).translation
    c_anchor = se3_inverse(anchor_pose).translation
    if np.linalg.norm(c_cur - c_anchor) > cfg.new_submap_translation:
        return True
    rel = se3_compose(current_pose, se3_inverse(anchor_pose))
    angle = 2.0 * np.arccos(np.clip(abs(rel.rotation[0]), -1.0, 1.0))
    return np.degrees(angle) > cfg.new_submap_rotation_deg


def densify(submap: Submap, keyframe: Keyframe, rendered: RenderedFrame,
            cfg: MapperConfig, world: WorldMap, K: CameraIntrinsics) -> int:
    """Spawn Gaussians from backprojected pixels of the densification mask.

    Mask: accumulated alpha below threshold, or depth error above a
    multiple of the median, or color error above a fixed threshold. Points
    with an existing neighbor within the search radius are skipped; new
    splats start isotropic at the nearest-neighbor distance.
    """
    depth_valid = keyframe.depth > 0.0
    d_err = np.abs(rendered.depth - keyframe.depth)
    med = float(np.median(d_err[depth_valid])) if depth_valid.any() else 0.0
    c_err = np.abs(rendered.color - keyframe.color).mean(axis=2)
    mask = (
        (rendered.alpha < cfg.densify_alpha_threshold)
        | (d_err > cfg.depth_error_multiplier * med)
        | (c_err > cfg.color_error_threshold)
    ) & depth_valid
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return 0
    if ys.size > cfg.max_points_per_keyframe:
        take = np.round(np.linspace(0, ys.size - 1, cfg.max_points_per_keyframe)).astype(int)
        ys, xs = ys[take], xs[take]

    depths = keyframe.depth[ys, xs]
    cam = np.stack(
        [(xs - K.cx) / K.fx * depths, (ys - K.cy) / K.fy * depths, depths], axis=1
    )
    inv = se3_inverse(keyframe.pose)
    pts = cam @ inv.rotation_matrix().T + inv.translation
    cols = keyframe.color[ys, xs]

    # sequential radius filter on a voxel hash (cell size = search radius)
    radius = cfg.nn_radius
    r2 = radius * radius
    cells: Dict[tuple, List[np.ndarray]] = {}

    def cell_of(p):
        return (int(np.floor(p[0] / radius)), int(np.floor(p[1] / radius)),
                int(np.floor(p[2] / radius)))

    def occupied_near(p) -> bool:
        cx, cy, cz = cell_of(p)
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for oz in (-1, 0, 1):
                    for q in cells.get((cx + ox, cy + oy, cz + oz), ()):
                        d = p - q
                        if d @ d < r2:
                            return True
        return False

    def insert(p):
        cells.setdefault(cell_of(p), []).append(p)

    for p in submap.gaussians.means:
        insert(p)
    accepted = []
    for i in range(pts.shape[0]):
        if not occupied_near(pts[i]):
            accepted.append(i)
            insert(pts[i])
    if not accepted:
        return 0
    accepted = np.asarray(accepted)
    new_pts = pts[accepted]
    new_cols = cols[accepted]

    all_means = np.vstack([submap.gaussians.means, new_pts])
    if all_means.shape[0] > 1:
        tree = cKDTree(all_means)
        dists, _ = tree.query(new_pts, k=2)
        nn = dists[:, 1]
    else:
        nn = np.full(new_pts.shape[0], cfg.nn_radius)
    scale0 = np.clip(nn, cfg.min_scale, cfg.max_scale)

    n_new = new_pts.shape[0]
    ids = world.take_gaussian_ids(n_new)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n_new, 1))
    submap.gaussians.append_arrays(
        new_pts, quats, np.repeat(scale0[:, None], 3, axis=1),
        np.full(n_new, cfg.new_opacity), new_cols,
        np.full(n_new, UNSEEN_UNCERTAINTY), np.full(n_new, keyframe.id), ids,
    )
    return n_new


def _dominant_records(frame: RenderedFrame):
    """Per pixel, the record index with the largest alpha*T contribution.

    Returns (pixel_indices, record_indices) for pixels with >= 1 record.
    Ties keep the front-most record.
    """
    off = frame.rec_offsets
    counts = np.diff(off)
    nz = np.nonzero(counts)[0]
    if nz.size == 0:
        return nz, nz
    w = frame.rec_alpha * frame.rec_T
    starts = off[nz]
    maxes = np.maximum.reduceat(w, starts)
    is_max = w == np.repeat(maxes, counts[nz])
    pos = np.where(is_max, np.arange(w.size), w.size)
    first = np.minimum.reduceat(pos, starts)
    return nz, first


def gaussian_uncertainty(submap: Submap, window: Sequence[Keyframe],
                         K: CameraIntrinsics) -> np.ndarray:
    """Refresh per-Gaussian depth uncertainty from dominated pixels.

    A pixel is dominated by the splat with the largest blend contribution
    there; each splat's uncertainty is the mean alpha*T-weighted squared
    depth deviation over its dominated (valid-depth) pixels across the
    window. Splats dominating nothing keep their previous value.
    """
    n = len(submap.gaussians)
    sums = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    for kf in window:
        frame = render([submap], kf.pose, K, gt_depth=kf.depth)
        pix, rec = _dominant_records(frame)
        if pix.size == 0:
            continue
        gt = kf.depth.reshape(-1)[pix]
        valid = gt > 0.0
        pix, rec, gt = pix[valid], rec[valid], gt[valid]
        rows = frame.ctx.indices[frame.rec_index[rec]]
        d = frame.ctx.depths[frame.rec_index[rec]]
        w = frame.rec_alpha[rec] * frame.rec_T[rec]
        contrib = w * (gt - d) ** 2
        sums += np.bincount(rows, weights=contrib, minlength=n)
        counts += np.bincount(rows, minlength=n)
    nu = submap.gaussians.uncertainties.copy()
    seen = counts > 0
    nu[seen] = sums[seen] / counts[seen]
    submap.gaussians.uncertainties = nu
    return nu


def informative_score(keyframe: Keyframe, nu_by_id: Dict[int, float],
                      unlabeled: Optional[Set[int]] = None) -> float:
    """Mean uncertainty of the keyframe's (optionally unlabeled) observed
    Gaussians; 0 for an empty set."""
    ids = [g for g in keyframe.observed_ids if g in nu_by_id]
    if unlabeled is not None:
        ids = [g for g in ids if g in unlabeled]
    if not ids:
        return 0.0
    return float(np.mean([nu_by_id[g] for g in ids]))


def select_keyframes(members: Sequence[Keyframe], k: int,
                     nu_by_id: Dict[int, float]) -> List[Keyframe]:
    """Greedy coverage schedule over keyframe informative scores.

    The most recent keyframe is always picked first; subsequent picks
    maximize the mean uncertainty over still-unlabeled Gaussians, labeling
    each pick's Gaussians. Labels reset once everything is covered. Ties
    go to the most recent frame index.
    """
    if not members:
        return []
    k_eff = min(k, len(members))
    by_recency = sorted(members, key=lambda f: f.frame_index, reverse=True)
    universe: Set[int] = set()
    for kf in members:
        universe |= {g for g in kf.observed_ids if g in nu_by_id}

    picked: List[Keyframe] = [by_recency[0]]
    labeled = {g for g in by_recency[0].observed_ids if g in nu_by_id}
    remaining = [kf for kf in by_recency if kf.id != by_recency[0].id]
    while len(picked) < k_eff:
        if universe and universe <= labeled:
            labeled = set()
        unlabeled = universe - labeled
        best = None
        best_score = -1.0
        for kf in remaining:
            s = informative_score(kf, nu_by_id, unlabeled)
            if best is None or s > best_score:
                best, best_score = kf, s
        picked.append(best)
        labeled |= {g for g in best.observed_ids if g in nu_by_id}
        remaining = [kf for kf in remaining if kf.id != best.id]
    return picked


@dataclass
class MappingLoss:
    total: float
    color: float
    depth: float
    reg: float
    dL_dC: np.ndarray
    dL_dD: np.ndarray
    d_scales: np.ndarray  # regularizer gradient w.r.t. per-Gaussian scales


def mapping_loss(rendered: RenderedFrame, keyframe: Keyframe, U: np.ndarray,
                 submap: Submap, cfg: MapperConfig) -> MappingLoss:
    """Uncertainty-weighted depth L1 + L1/SSIM color + isotropy regularizer.

    U is treated as a fixed weight map (no gradient flows through it);
    depth supervision skips invalid-depth pixels and pixels with low
    accumulated alpha.
    """
    c_hat, c_in = rendered.color, keyframe.color
    n_cpix = c_hat.size
    l1_color = float(np.abs(c_hat - c_in).mean())
    ssim_val, ssim_grad = ssim_with_grad(c_hat, c_in)
    color = (1.0 - cfg.ssim_mix) * l1_color + cfg.ssim_mix * (1.0 - ssim_val)
    dC = (1.0 - cfg.ssim_mix) * np.sign(c_hat - c_in) / n_cpix - cfg.ssim_mix * ssim_grad

    valid = (keyframe.depth > 0.0) & (rendered.alpha >= cfg.depth_loss_alpha_min)
    w = 1.0 / (U + cfg.depth_loss_eps)
    d_resid = rendered.depth - keyframe.depth
    depth = float((np.abs(d_resid) * w)[valid].sum())
    dD = np.where(valid, np.sign(d_resid) * w, 0.0)

    scales = submap.gaussians.scales
    if scales.size:
        s_bar = float(scales.mean())
        dev = scales - s_bar
        reg = float(np.abs(dev).mean())
        sign = np.sign(dev)
        d_scales = (sign - sign.mean()) / scales.size
    else:
        reg = 0.0
        d_scales = np.zeros_like(scales)

    total = cfg.lambda_color * color + cfg.lambda_depth * depth + cfg.lambda_reg * reg
    return MappingLoss(
        total=total, color=color, depth=depth, reg=reg,
        dL_dC=cfg.lambda_color * dC, dL_dD=cfg.lambda_depth * dD,
        d_scales=cfg.lambda_reg * d_scales,
    )


def _submap_extent(g: GaussianSet) -> float:
    if len(g) == 0:
        return 1.0
    centered = g.means - g.means.mean(axis=0)
    return max(float(np.linalg.norm(centered, axis=1).max()), 1e-3)


def optimize_submap(submap: Submap, members: Sequence[Keyframe], iterations: int,
                    cfg: MapperConfig, K: CameraIntrinsics,
                    schedule_fn=None, prune: bool = True) -> List[int]:
    """First-order descent of the mapping loss over the submap Gaussians.

    One keyframe supervises each iteration, drawn from the coverage
    schedule (or `schedule_fn(members, k)` when given, e.g. the random
    ablation). Poses stay fixed. Returns the ids of pruned Gaussians.
    """
    g = submap.gaussians
    if iterations <= 0 or len(g) == 0 or not members:
        return []

    rho = np.log(g.scales)
    o_clipped = np.clip(g.opacities, 1e-9, 1.0 - 1e-9)
    theta = np.log(o_clipped / (1.0 - o_clipped))

    adam_mu = Adam(cfg.lr_means * _submap_extent(g))
    adam_rot = Adam(cfg.lr_rotations)
    adam_rho = Adam(cfg.lr_scales)
    adam_theta = Adam(cfg.lr_opacities)
    adam_col = Adam(cfg.lr_colors)

    nu_by_id = {int(i): float(nu) for i, nu in zip(g.ids, g.uncertainties)}
    schedule: List[Keyframe] = []
    for _ in range(iterations):
        if not schedule:
            if schedule_fn is not None:
                schedule = list(schedule_fn(members, cfg.keyframes_per_optimization))
            else:
                schedule = select_keyframes(members, cfg.keyframes_per_optimization, nu_by_id)
        kf = schedule.pop(0)
        rendered = render([submap], kf.pose, K, gt_depth=kf.depth)
        ml = mapping_loss(rendered, kf, rendered.uncertainty, submap, cfg)
        gb = render_backward(rendered, ml.dL_dC, ml.dL_dD, [submap], kf.pose, K)

        g.means -= adam_mu.step(gb.d_means)
        g.rotations -= adam_rot.step(gb.d_rotations)
        rho -= adam_rho.step((gb.d_scales + ml.d_scales) * g.scales)
        g.scales = np.exp(rho)
        theta -= adam_theta.step(gb.d_opacities * g.opacities * (1.0 - g.opacities))
        g.opacities = 1.0 / (1.0 + np.exp(-theta))
        g.colors = np.clip(g.colors - adam_col.step(gb.d_colors), 0.0, 1.0)

    g.rotations /= np.linalg.norm(g.rotations, axis=1, keepdims=True)
    pruned_ids: List[int] = []
    if prune:
        drop = g.opacities < cfg.prune_opacity
        if drop.any():
            pruned_ids = [int(i) for i in g.ids[drop]]
            g.keep(~drop)
    return pruned_ids


def save_submap(submap: Submap, path) -> None:
    """Write the binary submap format (little-endian, f32 payload)."""
    g = submap.gaussians
    dt = np.dtype([
        ("mean", "<f4", (3,)), ("rot", "<f4", (4,)), ("scale", "<f4", (3,)),
        ("opacity", "<f4"), ("color", "<f4", (3,)), ("uncertainty", "<f4"),
        ("owner", "<u8"),
    ])
    rec = np.zeros(len(g), dtype=dt)
    rec["mean"] = g.means
    rec["rot"] = g.rotations
    rec["scale"] = g.scales
    rec["opacity"] = g.opacities
    rec["color"] = g.colors
    rec["uncertainty"] = g.uncertainties
    rec["owner"] = g.owners
    with open(path, "wb") as f:
        f.write(SUBMAP_MAGIC)
        f.write(struct.pack("<IQQ", SUBMAP_VERSION, len(g), submap.anchor_keyframe_id))
        f.write(rec.tobytes())


def load_submap(path) -> Submap:
    dt = np.dtype([
        ("mean", "<f4", (3,)), ("rot", "<f4", (4,)), ("scale", "<f4", (3,)),
        ("opacity", "<f4"), ("color", "<f4", (3,)), ("uncertainty", "<f4"),
        ("owner", "<u8"),
    ])
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SUBMAP_MAGIC:
            raise ValueError(f"bad submap magic {magic!r}")
        version, count, anchor = struct.unpack("<IQQ", f.read(20))
        if version != SUBMAP_VERSION:
            raise ValueError(f"unsupported submap version {version}")
        rec = np.frombuffer(f.read(count * dt.itemsize), dtype=dt)
    if rec.size != count:
        raise ValueError("truncated submap file")
    sm = Submap(id=0, anchor_keyframe_id=int(anchor), active=False)
    if count:
        rot = rec["rot"].astype(np.float64)
        rot /= np.linalg.norm(rot, axis=1, keepdims=True)
        sm.gaussians.append_arrays(
            rec["mean"].astype(np.float64), rot, rec["scale"].astype(np.float64),
            rec["opacity"].astype(np.float64), rec["color"].astype(np.float64),
            rec["uncertainty"].astype(np.float64), rec["owner"].astype(np.int64),
            np.arange(count, dtype=np.int64),
        )
    return sm
