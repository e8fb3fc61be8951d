"""Frame-to-model camera tracking against the active submap.

The pose is initialized with a compositional constant-velocity prediction
and refined by first-order descent on a 6-DoF twist, minimizing a masked
color+depth L1 loss. Alpha and inlier masks exclude poorly reconstructed
or unobserved areas; they are recomputed every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, Pose, Twist, se3_compose, se3_exp, se3_inverse
from .optim import Adam
from .render import RenderedFrame, render, render_backward


@dataclass
class InputFrame:
    """One RGB-D input: color in [0,1], depth in meters (0 = invalid)."""

    index: int
    timestamp: float
    color: np.ndarray  # (H,W,3)
    depth: np.ndarray  # (H,W)

    def __post_init__(self):
        if np.any(self.depth < 0):
            raise ValueError("negative depth in input frame")
        if self.color.shape[:2] != self.depth.shape:
            raise ValueError("color/depth dimensions disagree")


@dataclass
class TrackingMasks:
    alpha: np.ndarray   # (H,W) bool, well-reconstructed pixels
    inlier: np.ndarray  # (H,W) bool, depth residual inliers

    @property
    def combined(self) -> np.ndarray:
        return self.alpha & self.inlier


@dataclass
class TrackerConfig:
    color_weight: float = 0.9          # lambda_c in the tracking loss
    iterations: int = 60
    start_iterations: int = 200        # used while bootstrapping the map
    rotation_step: float = 2e-3
    translation_step: float = 1e-3
    alpha_mask_threshold: float = 0.98
    inlier_multiplier: float = 10.0    # c_in on the median depth residual

    def __post_init__(self):
        if not 0.0 <= self.color_weight <= 1.0:
            raise ValueError("color_weight must be in [0,1]")
        if min(self.iterations, self.start_iterations) < 0:
            raise ValueError("iteration counts must be non-negative")
        if min(self.rotation_step, self.translation_step,
               self.alpha_mask_threshold, self.inlier_multiplier) <= 0:
            raise ValueError("steps and thresholds must be positive")


def predict_pose(t_prev: Pose, t_prev2: Pose) -> Pose:
    """Constant-velocity prediction: prev ∘ (prev2^-1 ∘ prev)."""
    return se3_compose(t_prev, se3_compose(se3_inverse(t_prev2), t_prev))


def compute_masks(rendered: RenderedFrame, frame: InputFrame, cfg: TrackerConfig) -> TrackingMasks:
    """Alpha mask from accumulated alpha, inlier mask from the median
    absolute depth residual over alpha-valid pixels."""
    alpha_mask = rendered.alpha >= cfg.alpha_mask_threshold
    depth_valid = frame.depth > 0.0
    resid = np.abs(rendered.depth - frame.depth)
    med_support = alpha_mask & depth_valid
    if not med_support.any():
        return TrackingMasks(alpha=alpha_mask, inlier=np.zeros_like(alpha_mask))
    med = float(np.median(resid[med_support]))
    inlier = (resid <= cfg.inlier_multiplier * med) & depth_valid
    return TrackingMasks(alpha=alpha_mask, inlier=inlier)


def tracking_loss(rendered: RenderedFrame, frame: InputFrame,
                  masks: TrackingMasks, color_weight: float) -> float:
    """Masked sum of channel-averaged color L1 and depth L1 residuals."""
    m = masks.combined
    if not m.any():
        return 0.0
    c_err = np.abs(rendered.color - frame.color).mean(axis=2)
    d_err = np.abs(rendered.depth - frame.depth)
    per_pixel = color_weight * c_err + (1.0 - color_weight) * d_err
    return float(per_pixel[m].sum())


def tracking_loss_grads(rendered: RenderedFrame, frame: InputFrame,
                        masks: TrackingMasks, color_weight: float):
    """Loss plus its gradients w.r.t. the rendered color and depth images."""
    m = masks.combined
    loss = tracking_loss(rendered, frame, masks, color_weight)
    dC = np.where(
        m[:, :, None], color_weight * np.sign(rendered.color - frame.color) / 3.0, 0.0
    )
    dD = np.where(m, (1.0 - color_weight) * np.sign(rendered.depth - frame.depth), 0.0)
    return loss, dC, dD


def track_frame(active_submap, frame: InputFrame, init: Pose,
                K: CameraIntrinsics, cfg: TrackerConfig,
                iterations: Optional[int] = None) -> Pose:
    """Optimize the camera pose against the active submap.

    Descends the twist of the pose relative to `init` with Adam (separate
    rotation/translation rates) and returns the evaluated iterate with the
    lowest loss. Raises ValueError on an empty submap.
    """
    gaussians = active_submap.gaussians if hasattr(active_submap, "gaussians") else active_submap
    if len(gaussians) == 0:
        raise ValueError("cannot track against an empty submap")
    n_iter = cfg.iterations if iterations is None else iterations

    lr = np.array([cfg.rotation_step] * 3 + [cfg.translation_step] * 3)
    adam = Adam(lr)
    pose = init.copy()
    best_pose = init.copy()
    best_loss = None
    for _ in range(max(n_iter, 1)):
        rendered = render([active_submap], pose, K)
        masks = compute_masks(rendered, frame, cfg)
        if not masks.combined.any():
            break
        loss, dC, dD = tracking_loss_grads(rendered, frame, masks, cfg.color_weight)
        if best_loss is None or loss < best_loss:
            best_loss = loss
            best_pose = pose.copy()
        grads = render_backward(rendered, dC, dD, [active_submap], pose, K)
        step = adam.step(grads.d_pose)
        pose = se3_compose(se3_exp(Twist.from_vector(-step)), pose)
    return best_pose
