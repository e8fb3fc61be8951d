"""Trajectory and rendering metrics: ATE RMSE after rigid alignment,
PSNR, SSIM, depth L1, and the JSON run report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import Pose, matrix_to_quat, se3_inverse
from .ssim import ssim

REPORT_SCHEMA = "glc-report-v1"
PSNR_CAP = 99.0


def _centers(poses: Sequence[Pose]) -> np.ndarray:
    return np.stack([se3_inverse(p).translation for p in poses])


def align_rigid(est: Sequence[Pose], gt: Sequence[Pose]) -> Pose:
    """Closed-form least-squares rigid transform G minimizing
    sum |G·c_est - c_gt|^2 over camera centers (no scale).

    Raises ValueError for fewer than 3 poses or (near-)collinear centers.
    """
    if len(est) != len(gt):
        raise ValueError("trajectory lengths differ")
    if len(est) < 3:
        raise ValueError("need at least 3 poses to align")
    a = _centers(est)
    b = _centers(gt)
    a_mean = a.mean(axis=0)
    b_mean = b.mean(axis=0)
    H = (a - a_mean).T @ (b - b_mean)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= max(S[0], 1.0) * 1e-12:
        raise ValueError("rank-deficient trajectory covariance (collinear centers)")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = b_mean - R @ a_mean
    return Pose(matrix_to_quat(R), t)


def ate_rmse(est: Sequence[Pose], gt: Sequence[Pose], align: bool = True) -> float:
    """RMS translational error in cm, after rigid alignment by default."""
    a = _centers(est)
    b = _centers(gt)
    if align:
        G = align_rigid(est, gt)
        a = a @ G.rotation_matrix().T + G.translation
    resid = np.linalg.norm(a - b, axis=1)
    return float(np.sqrt(np.mean(resid**2)) * 100.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise on unit dynamic range, capped at 99 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def depth_l1(d_est: np.ndarray, d_gt: np.ndarray) -> float:
    """Mean absolute depth difference in cm over mutually valid pixels."""
    valid = (d_est > 0) & (d_gt > 0)
    if not valid.any():
        return 0.0
    return float(np.abs(d_est - d_gt)[valid].mean() * 100.0)


@dataclass
class MetricsReport:
    ate_rmse_cm: Optional[float] = None
    psnr_per_view: List[float] = field(default_factory=list)
    ssim_per_view: List[float] = field(default_factory=list)
    depth_l1_cm_per_view: List[float] = field(default_factory=list)
    tracking_s_per_frame: float = 0.0
    mapping_s_per_frame: float = 0.0
    total_s: float = 0.0
    keyframes: int = 0
    submaps: int = 0
    loops_closed: int = 0
    global_loops_closed: int = 0
    local_loops_closed: int = 0
    gaussians: int = 0
    config: Dict = field(default_factory=dict)

    @property
    def psnr_mean(self) -> Optional[float]:
        return float(np.mean(self.psnr_per_view)) if self.psnr_per_view else None

    @property
    def ssim_mean(self) -> Optional[float]:
        return float(np.mean(self.ssim_per_view)) if self.ssim_per_view else None

    @property
    def depth_l1_cm_mean(self) -> Optional[float]:
        return (
            float(np.mean(self.depth_l1_cm_per_view))
            if self.depth_l1_cm_per_view else None
        )

    def to_dict(self) -> Dict:
        return {
            "schema": REPORT_SCHEMA,
            "ate_rmse_cm": self.ate_rmse_cm,
            "psnr_per_view": self.psnr_per_view,
            "psnr_mean": self.psnr_mean,
            "ssim_per_view": self.ssim_per_view,
            "ssim_mean": self.ssim_mean,
            "depth_l1_cm_per_view": self.depth_l1_cm_per_view,
            "depth_l1_cm_mean": self.depth_l1_cm_mean,
            "runtime": {
                "tracking_s_per_frame": self.tracking_s_per_frame,
                "mapping_s_per_frame": self.mapping_s_per_frame,
                "total_s": self.total_s,
            },
            "counts": {
                "keyframes": self.keyframes,
                "submaps": self.submaps,
                "loops_closed": self.loops_closed,
                "global_loops_closed": self.global_loops_closed,
                "local_loops_closed": self.local_loops_closed,
                "gaussians": self.gaussians,
            },
            "config": self.config,
        }


def write_report(report: MetricsReport, path) -> None:
    """Deterministic key-sorted JSON dump of the report."""
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


def load_report(path) -> Dict:
    with open(path) as f:
        data = json.load(f)
    if data.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unexpected report schema {data.get('schema')!r}")
    return data


__all__ = [
    "align_rigid", "ate_rmse", "psnr", "ssim", "depth_l1",
    "MetricsReport", "write_report", "load_report", "REPORT_SCHEMA",
]
