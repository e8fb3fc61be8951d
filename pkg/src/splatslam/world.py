"""Synthetic ground-truth scene generation and RGB-D dataset IO.

Synthetic datasets are imaged with the package's own renderer, so
zero-noise experiments are exactly realizable. Real data follows the
TUM-RGBD directory convention (rgb.txt/depth.txt indexes, 16-bit depth
PNGs at 1/5000 m per unit, trajectories as "t tx ty tz qx qy qz qw").
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .gaussians import UNSEEN_UNCERTAINTY, GaussianSet
from .geometry import CameraIntrinsics, Pose, matrix_to_quat, se3_inverse
from .render import render
from .tracker import InputFrame

TUM_DEPTH_SCALE = 5000.0      # depth png value per meter
TUM_ASSOC_WINDOW = 0.02       # seconds
WALL_TILES = 16               # flattened Gaussians per wall edge


@dataclass
class SyntheticScene:
    gaussians: GaussianSet
    extent_lo: np.ndarray
    extent_hi: np.ndarray
    seed: int

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.extent_lo + self.extent_hi)


@dataclass
class SequenceSpec:
    kind: str = "circle"               # circle | lawnmower | figure-eight
    frames: int = 120
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(48.0, 48.0, 31.5, 23.5, 64, 48)
    )
    depth_noise: float = 0.0           # meters, std-dev
    color_noise: float = 0.0
    closed_loop: bool = True           # trajectory returns to its start
    noise_seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("need at least 2 frames")
        if self.depth_noise < 0 or self.color_noise < 0:
            raise ValueError("noise std-devs must be non-negative")
        if self.kind not in ("circle", "lawnmower", "figure-eight"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")


def generate_scene(seed: int, count: int, extent=((-1.2, -1.2, -0.8), (1.2, 1.2, 0.8)),
                   walls: bool = True) -> SyntheticScene:
    """Seeded random colored Gaussians inside the extent, plus wall-like
    flattened Gaussian sheets on the box faces for full depth coverage."""
    if count < 1:
        raise ValueError("need at least one gaussian")
    rng = np.random.default_rng(seed)
    lo = np.asarray(extent[0], dtype=np.float64)
    hi = np.asarray(extent[1], dtype=np.float64)
    span = hi - lo

    g = GaussianSet()
    # floaters stay in an inner core so camera paths in the outer annulus
    # never collide with them
    center = 0.5 * (lo + hi)
    core = 0.225 * span
    means = rng.uniform(center - core, center + core, size=(count, 3))
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(0.03, 0.07, size=(count, 3))
    opac = rng.uniform(0.65, 0.95, size=count)
    colors = rng.uniform(0.05, 0.95, size=(count, 3))
    g.append_arrays(means, quats, scales, opac, colors,
                    np.full(count, UNSEEN_UNCERTAINTY),
                    np.full(count, -1, dtype=np.int64),
                    np.arange(count, dtype=np.int64))

    if walls:
        _add_wall_sheets(g, lo, hi, rng)
    return SyntheticScene(gaussians=g, extent_lo=lo, extent_hi=hi, seed=seed)


def _add_wall_sheets(g: GaussianSet, lo: np.ndarray, hi: np.ndarray, rng) -> None:
    """Six tiled sheets of flattened Gaussians on the extent's faces."""
    axes = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]  # (normal, tangent, tangent)
    start = len(g)
    means, quats, scales, colors = [], [], [], []
    for normal, ta, tb in axes:
        for face_val in (lo[normal], hi[normal]):
            ua = np.linspace(lo[ta], hi[ta], WALL_TILES + 2)[1:-1]
            ub = np.linspace(lo[tb], hi[tb], WALL_TILES + 2)[1:-1]
            spacing_a = (hi[ta] - lo[ta]) / (WALL_TILES + 1)
            spacing_b = (hi[tb] - lo[tb]) / (WALL_TILES + 1)
            for a in ua:
                for b in ub:
                    mu = np.zeros(3)
                    mu[normal] = face_val
                    mu[ta] = a
                    mu[tb] = b
                    # tangential 3-sigma stays small enough that camera
                    # paths inside the box keep clear of every splat core
                    s = np.zeros(3)
                    s[normal] = 0.01
                    s[ta] = 0.6 * spacing_a
                    s[tb] = 0.6 * spacing_b
                    means.append(mu)
                    scales.append(s)
                    quats.append([1.0, 0.0, 0.0, 0.0])
                    colors.append(rng.uniform(0.1, 0.9, size=3))
    n = len(means)
    g.append_arrays(
        np.array(means), np.array(quats), np.array(scales),
        np.full(n, 0.92), np.array(colors), np.full(n, UNSEEN_UNCERTAINTY),
        np.full(n, -1, dtype=np.int64), np.arange(start, start + n, dtype=np.int64),
    )


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-from-world pose with +z forward toward the target, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    z_c = target - eye
    z_c = z_c / np.linalg.norm(z_c)
    u = np.asarray(up, dtype=np.float64)
    if abs(np.dot(u, z_c)) > 0.999:
        u = np.array([0.0, 1.0, 0.0])
    y_c = -u + np.dot(u, z_c) * z_c
    y_c /= np.linalg.norm(y_c)
    x_c = np.cross(y_c, z_c)
    R_wc = np.stack([x_c, y_c, z_c], axis=1)
    R_cw = R_wc.T
    return Pose(matrix_to_quat(R_cw), -(R_cw @ eye))


def generate_trajectory(spec: SequenceSpec, scene: SyntheticScene) -> List[Pose]:
    """Smooth look-at camera path inside the scene extent."""
    n = spec.frames
    center = scene.center
    half = 0.5 * (scene.extent_hi - scene.extent_lo)
    r = 0.72 * min(half[0], half[1])   # outside the floater core, inside walls
    height = center[2] + 0.15 * half[2]

    if spec.kind == "circle":
        sweep = 2.0 * np.pi if spec.closed_loop else 1.5 * np.pi
        ang = np.linspace(0.0, sweep, n)
        xs = center[0] + r * np.cos(ang)
        ys = center[1] + r * np.sin(ang)
        zs = np.full(n, height)
    elif spec.kind == "figure-eight":
        # lissajous on a plane standing back from the core
        sweep = 2.0 * np.pi if spec.closed_loop else 1.5 * np.pi
        t = np.linspace(0.0, sweep, n)
        xs = center[0] + 0.5 * half[0] * np.sin(t)
        ys = np.full(n, center[1] - r)
        zs = center[2] + 0.3 * half[2] * np.sin(2.0 * t)
    else:  # lawnmower: horizontal sweeps stacked in height, one side back
        t = np.linspace(0.0, 1.0, n)
        xs = center[0] + 0.5 * half[0] * np.sin(2.0 * np.pi * 3.0 * t)
        ys = np.full(n, center[1] - r)
        zs = center[2] + 0.3 * half[2] * (2.0 * t - 1.0)

    poses = []
    for k in range(n):
        eye = np.array([xs[k], ys[k], zs[k]])
        poses.append(look_at(eye, center))
    return poses


def render_dataset(scene: SyntheticScene, trajectory: Sequence[Pose],
                   spec: SequenceSpec) -> Tuple[List[InputFrame], List[Pose]]:
    """Image the scene along the trajectory with the forward renderer.

    Additive Gaussian noise per the spec is applied to valid pixels only;
    depth is clamped non-negative and color to [0,1]. Ground-truth poses
    are returned unchanged.
    """
    K = spec.intrinsics
    rng = np.random.default_rng(spec.noise_seed)
    frames: List[InputFrame] = []
    for i, pose in enumerate(trajectory):
        f = render([scene.gaussians], pose, K)
        color = f.color
        depth = f.depth
        if spec.color_noise > 0:
            color = np.clip(color + rng.normal(0.0, spec.color_noise, color.shape), 0.0, 1.0)
        if spec.depth_noise > 0:
            noise = rng.normal(0.0, spec.depth_noise, depth.shape)
            depth = np.maximum(np.where(depth > 0, depth + noise, depth), 0.0)
        frames.append(InputFrame(index=i, timestamp=i / 30.0, color=color, depth=depth))
    return frames, [p.copy() for p in trajectory]


# --- TUM-RGBD directory format ------------------------------------------

def _parse_index(path) -> List[Tuple[float, str]]:
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{ln}: malformed index line {line!r}")
            try:
                ts = float(parts[0])
            except ValueError as e:
                raise ValueError(f"{path}:{ln}: bad timestamp {parts[0]!r}") from e
            out.append((ts, parts[1]))
    return out


def _associate(ts_a: np.ndarray, ts_b: np.ndarray, window: float) -> List[Tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp association within the window."""
    candidates = []
    for ia, ta in enumerate(ts_a):
        j = int(np.searchsorted(ts_b, ta))
        for ib in (j - 1, j):
            if 0 <= ib < ts_b.size:
                dt = abs(ta - ts_b[ib])
                if dt <= window:
                    candidates.append((dt, ia, ib))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, ia, ib in candidates:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        pairs.append((ia, ib))
    pairs.sort()
    return pairs


def load_tum_rgbd(directory) -> Tuple[List[InputFrame], Optional[List[Pose]]]:
    """Load a TUM-RGBD directory; color/depth are associated by nearest
    timestamp within 20 ms, unmatched frames dropped. Returns frames and,
    when groundtruth.txt exists, the per-frame ground-truth poses
    (camera-from-world)."""
    rgb_index = os.path.join(directory, "rgb.txt")
    depth_index = os.path.join(directory, "depth.txt")
    if not os.path.isfile(rgb_index) or not os.path.isfile(depth_index):
        raise FileNotFoundError(f"missing rgb.txt/depth.txt in {directory}")
    rgb = _parse_index(rgb_index)
    depth = _parse_index(depth_index)
    pairs = _associate(
        np.array([t for t, _ in rgb]), np.array([t for t, _ in depth]), TUM_ASSOC_WINDOW
    )

    frames: List[InputFrame] = []
    for ia, ib in pairs:
        ts, rgb_path = rgb[ia]
        _, depth_path = depth[ib]
        color = np.asarray(Image.open(os.path.join(directory, rgb_path)), dtype=np.float64)
        color = color[..., :3] / 255.0
        d_raw = np.asarray(Image.open(os.path.join(directory, depth_path)), dtype=np.float64)
        frames.append(InputFrame(
            index=len(frames), timestamp=ts, color=color, depth=d_raw / TUM_DEPTH_SCALE,
        ))

    gt_file = os.path.join(directory, "groundtruth.txt")
    gt_poses: Optional[List[Pose]] = None
    if os.path.isfile(gt_file):
        ts_list, poses = load_trajectory_tum(gt_file)
        ts_arr = np.asarray(ts_list)
        gt_poses = []
        matched_frames = []
        for fr in frames:
            j = int(np.searchsorted(ts_arr, fr.timestamp))
            best = None
            for ib in (j - 1, j):
                if 0 <= ib < ts_arr.size:
                    dt = abs(fr.timestamp - ts_arr[ib])
                    if dt <= TUM_ASSOC_WINDOW and (best is None or dt < best[0]):
                        best = (dt, ib)
            if best is not None:
                matched_frames.append(fr)
                gt_poses.append(poses[best[1]])
        frames = matched_frames
        for i, fr in enumerate(frames):
            fr.index = i
    return frames, gt_poses


def write_tum_rgbd(directory, frames: Sequence[InputFrame],
                   poses: Optional[Sequence[Pose]] = None) -> None:
    """Export frames (and optional ground truth) in TUM directory layout."""
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth images", "# timestamp filename"]
    for fr in frames:
        name = f"{fr.timestamp:.6f}.png"
        rgb8 = np.clip(np.round(fr.color * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8, mode="RGB").save(os.path.join(directory, "rgb", name))
        d16 = np.clip(np.round(fr.depth * TUM_DEPTH_SCALE), 0, 65535).astype(np.uint16)
        Image.fromarray(d16, mode="I;16").save(os.path.join(directory, "depth", name))
        rgb_lines.append(f"{fr.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{fr.timestamp:.6f} depth/{name}")
    with open(os.path.join(directory, "rgb.txt"), "w") as f:
        f.write("\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w") as f:
        f.write("\n".join(depth_lines) + "\n")
    if poses is not None:
        write_trajectory_tum(
            poses, [fr.timestamp for fr in frames], os.path.join(directory, "groundtruth.txt")
        )


def write_trajectory_tum(poses: Sequence[Pose], timestamps: Sequence[float], path) -> None:
    """Write "t tx ty tz qx qy qz qw" lines (world-from-camera)."""
    if len(poses) != len(timestamps):
        raise ValueError("poses and timestamps must have equal length")
    lines = []
    for pose, ts in zip(poses, timestamps):
        inv = se3_inverse(pose)
        t = inv.translation
        w, x, y, z = inv.rotation
        lines.append(
            f"{ts:.6f} {t[0]:.6f} {t[1]:.6f} {t[2]:.6f} {x:.6f} {y:.6f} {z:.6f} {w:.6f}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_trajectory_tum(path) -> Tuple[List[float], List[Pose]]:
    """Read a TUM trajectory; returns timestamps and camera-from-world poses."""
    timestamps, poses = [], []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise ValueError(f"{path}:{ln}: bad number in {line!r}") from e
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            world_from_cam = Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
            timestamps.append(ts)
            poses.append(se3_inverse(world_from_cam))
    return timestamps, poses
