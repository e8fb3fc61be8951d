"""Hierarchical loop closing: place-recognition databases, global/local
detection, loop-constraint estimation, keyframe-centric map adjustment and
post-adjustment refinement.

Place descriptors are pluggable; the built-in one is a mean-subtracted,
L2-normalized 16x16 tiny image. Global detection fires when a submap
closes (its threshold adapts to the similarity spread inside that submap);
local detection runs per keyframe inside the active submap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .geometry import CameraIntrinsics, Pose, quat_multiply, se3_compose, se3_inverse
from .mapper import (Keyframe, MapperConfig, Submap, observed_gaussians,
                     optimize_submap)
from .tracker import InputFrame, TrackerConfig, compute_masks, track_frame, tracking_loss
from .render import render

DESCRIPTOR_GRID = 16
LOCAL_SIMILARITY = 0.8      # s_local
GEOMETRY_OVERLAP = 0.2      # minimum observed-set Jaccard between candidates
RECENCY_WINDOW = 3          # local entries excluded as too recent
LOOP_INFO_ROT = 100.0
LOOP_INFO_TRANS = 400.0
CONSTRAINT_REJECT_RATIO = 3.0


def _area_downsample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-weighted downsample via interpolated cumulative sums."""
    def pool(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
        a = np.moveaxis(a, axis, 0)
        n = a.shape[0]
        cum = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])
        bounds = np.linspace(0.0, n, n_out + 1)
        lo = np.floor(bounds).astype(int)
        frac = bounds - lo
        lo = np.minimum(lo, n)
        vals = cum[lo] + frac.reshape((-1,) + (1,) * (a.ndim - 1)) * (
            cum[np.minimum(lo + 1, n)] - cum[lo]
        )
        out = (vals[1:] - vals[:-1]) / (n / n_out)
        return np.moveaxis(out, 0, axis)

    return pool(pool(img, out_h, 0), out_w, 1)


def compute_descriptor(color: np.ndarray) -> np.ndarray:
    """Tiny-image place descriptor: grayscale, 16x16 area downsample,
    mean-subtract, L2-normalize. Constant images map to the first basis
    vector."""
    gray = 0.299 * color[..., 0] + 0.587 * color[..., 1] + 0.114 * color[..., 2]
    small = _area_downsample(gray, DESCRIPTOR_GRID, DESCRIPTOR_GRID).reshape(-1)
    small = small - small.mean()
    norm = np.linalg.norm(small)
    if norm < 1e-12:
        out = np.zeros(DESCRIPTOR_GRID * DESCRIPTOR_GRID)
        out[0] = 1.0
        return out
    return small / norm


DescriptorFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class LoopCandidate:
    query_id: int
    match_id: int
    similarity: float
    level: str  # "global" | "local"

    def __post_init__(self):
        if self.query_id == self.match_id:
            raise ValueError("loop candidate cannot match itself")


@dataclass
class KeyframeDatabase:
    """Descriptor indexes: global keyframes, and the active submap history."""

    global_entries: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    local_entries: List[Tuple[int, np.ndarray]] = field(default_factory=list)

    def add_global(self, kf_id: int, descriptor: np.ndarray) -> None:
        self.global_entries.append((kf_id, descriptor))

    def add_local(self, kf_id: int, descriptor: np.ndarray) -> None:
        self.local_entries.append((kf_id, descriptor))

    def reset_local(self) -> None:
        self.local_entries = []


def geometry_check(candidate: LoopCandidate, keyframes: Dict[int, Keyframe],
                   K: CameraIntrinsics, submaps: Sequence[Submap],
                   threshold: float = GEOMETRY_OVERLAP) -> bool:
    """Overlap-ratio gate at the current pose estimates."""
    obs_q = observed_gaussians(keyframes[candidate.query_id].pose, K, submaps)
    obs_m = observed_gaussians(keyframes[candidate.match_id].pose, K, submaps)
    union = obs_q | obs_m
    if not union:
        return False
    return len(obs_q & obs_m) / len(union) >= threshold


def detect_global_loop(db: KeyframeDatabase, new_global_kf: Keyframe,
                       closed_submap_kfs: Sequence[Keyframe],
                       keyframes: Dict[int, Keyframe], K: CameraIntrinsics,
                       submaps: Sequence[Submap]) -> Optional[LoopCandidate]:
    """Best global-database match above the submap-adaptive threshold.

    The threshold is the minimum similarity between the new global
    keyframe and the keyframes of the just-closed submap; matches inside
    that submap are excluded.
    """
    if not db.global_entries or not closed_submap_kfs:
        return None
    closed_ids = {kf.id for kf in closed_submap_kfs}
    s_global = min(
        float(np.dot(new_global_kf.descriptor, kf.descriptor)) for kf in closed_submap_kfs
    )
    best: Optional[Tuple[int, float]] = None
    for kf_id, desc in db.global_entries:
        if kf_id in closed_ids or kf_id == new_global_kf.id:
            continue
        sim = float(np.dot(new_global_kf.descriptor, desc))
        if best is None or sim > best[1]:
            best = (kf_id, sim)
    if best is None or best[1] <= s_global:
        return None
    cand = LoopCandidate(
        query_id=new_global_kf.id, match_id=best[0], similarity=best[1], level="global"
    )
    if keyframes[cand.query_id].frame_index <= keyframes[cand.match_id].frame_index:
        return None
    if not geometry_check(cand, keyframes, K, submaps):
        return None
    return cand


def detect_local_loop(db: KeyframeDatabase, keyframe: Keyframe,
                      keyframes: Dict[int, Keyframe], K: CameraIntrinsics,
                      submaps: Sequence[Submap],
                      s_local: float = LOCAL_SIMILARITY) -> Optional[LoopCandidate]:
    """Most similar active-submap keyframe, skipping the most recent
    entries, gated by s_local and the geometry check."""
    eligible = db.local_entries[:-RECENCY_WINDOW] if RECENCY_WINDOW else db.local_entries
    best: Optional[Tuple[int, float]] = None
    for kf_id, desc in eligible:
        if kf_id == keyframe.id:
            continue
        sim = float(np.dot(keyframe.descriptor, desc))
        if best is None or sim > best[1]:
            best = (kf_id, sim)
    if best is None or best[1] <= s_local:
        return None
    cand = LoopCandidate(
        query_id=keyframe.id, match_id=best[0], similarity=best[1], level="local"
    )
    if keyframes[cand.query_id].frame_index <= keyframes[cand.match_id].frame_index:
        return None
    if not geometry_check(cand, keyframes, K, submaps):
        return None
    return cand


def estimate_loop_constraint(query_kf: Keyframe, match_kf: Keyframe,
                             match_submap: Submap, K: CameraIntrinsics,
                             tracker_cfg: TrackerConfig
                             ) -> Optional[Tuple[Pose, np.ndarray]]:
    """Measure the loop relative pose by tracking the query frame against
    the matched submap.

    Returns (Z, information) or None when refinement degrades the frame
    (loss above CONSTRAINT_REJECT_RATIO x the pre-refinement loss) or no
    mask support exists.
    """
    frame = InputFrame(
        index=query_kf.frame_index, timestamp=query_kf.timestamp,
        color=query_kf.color, depth=query_kf.depth,
    )
    init = query_kf.pose

    pre_render = render([match_submap], init, K)
    pre_masks = compute_masks(pre_render, frame, tracker_cfg)
    if not pre_masks.combined.any():
        return None
    pre_loss = tracking_loss(pre_render, frame, pre_masks, tracker_cfg.color_weight)

    refined = track_frame(match_submap, frame, init, K, tracker_cfg)

    post_render = render([match_submap], refined, K)
    post_masks = compute_masks(post_render, frame, tracker_cfg)
    n_sup = int(post_masks.combined.sum())
    if n_sup == 0:
        return None
    post_loss = tracking_loss(post_render, frame, post_masks, tracker_cfg.color_weight)
    if post_loss > CONSTRAINT_REJECT_RATIO * pre_loss:
        return None

    mean_resid = post_loss / n_sup
    scale = 1.0 / (mean_resid + 1e-3)
    info = np.diag([LOOP_INFO_ROT] * 3 + [LOOP_INFO_TRANS] * 3) * scale
    Z = se3_compose(se3_inverse(match_kf.pose), refined)
    return Z, info


def apply_map_adjustment(submaps: Sequence[Submap], keyframes: Dict[int, Keyframe],
                         optimized: Dict[int, Pose]) -> None:
    """Rigidly carry every Gaussian along its owner keyframe's pose update
    and install the optimized keyframe poses.

    The update preserves each Gaussian's camera-frame coordinates in its
    owner view, so re-renders from the updated poses are unchanged.
    """
    corrections: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for kf_id, new_pose in optimized.items():
        old_pose = keyframes[kf_id].pose
        corr = se3_compose(se3_inverse(new_pose), old_pose)
        corrections[kf_id] = (corr.rotation_matrix(), corr.translation, corr.rotation)

    for sm in submaps:
        g = sm.gaussians
        if len(g) == 0:
            continue
        for owner in np.unique(g.owners):
            owner = int(owner)
            if owner not in corrections:
                raise ValueError(f"owner keyframe {owner} missing from optimized poses")
            R, t, q = corrections[owner]
            rows = g.owners == owner
            g.means[rows] = g.means[rows] @ R.T + t
            quats = g.rotations[rows]
            for r in range(quats.shape[0]):
                quats[r] = quat_multiply(q, quats[r])
            g.rotations[rows] = quats / np.linalg.norm(quats, axis=1, keepdims=True)

    for kf_id, new_pose in optimized.items():
        keyframes[kf_id].pose = new_pose.copy()


def refine_submap(submap: Submap, members: Sequence[Keyframe],
                  cfg: MapperConfig, K: CameraIntrinsics,
                  iterations: int = 50) -> None:
    """Post-adjustment polish: the mapping loss with pruning and
    densification disabled; the Gaussian count stays constant."""
    optimize_submap(submap, members, iterations, cfg, K, prune=False)
