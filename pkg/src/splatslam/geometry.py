"""Rigid-body transforms (SE(3) with quaternion rotations), pinhole camera
model and point projection.

Conventions used across the package:
  - Pose maps world coordinates into the camera frame (camera-from-world).
  - Quaternions are (w, x, y, z) and kept unit-norm.
  - Twists are split into a rotational axis-angle part and a translational
    part, ordered [rotation, translation] when flattened to 6-vectors.
  - Pixel coordinates are continuous with pixel centers at integer positions.

Pose, Twist and CameraIntrinsics are treated as immutable after
construction; they are safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_PROJECT_DEPTH = 1e-6
MAX_LOG_ANGLE = np.pi - 1e-6


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n <= 0.0:
        raise ValueError("zero-norm quaternion")
    q = q / n
    # fix the double-cover sign for reproducible storage
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b of (w,x,y,z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w,x,y,z)."""
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w,x,y,z) of a rotation matrix (Shepperd's method)."""
    m = R
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return _normalize_quat(q)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass
class Pose:
    """Camera-from-world rigid transform: x_cam = R x_world + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = _normalize_quat(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64).copy()

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.rotation)
        T[:3, 3] = self.translation
        return T

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform world points (3,) or (N,3) into the camera frame."""
        R = quat_to_matrix(self.rotation)
        return points @ R.T + self.translation

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())


@dataclass
class Twist:
    """se(3) element: axis-angle rotation (rad) and translation (m)."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).copy()
        self.translation = np.asarray(self.translation, dtype=np.float64).copy()

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=np.float64)
        return Twist(v[:3], v[3:6])


@dataclass
class CameraIntrinsics:
    """Pinhole camera: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def se3_compose(a: Pose, b: Pose) -> Pose:
    """Composition a∘b: apply b first, then a."""
    q = quat_multiply(a.rotation, b.rotation)
    Ra = quat_to_matrix(a.rotation)
    t = Ra @ b.translation + a.translation
    return Pose(q, t)


def se3_inverse(a: Pose) -> Pose:
    q_inv = quat_conjugate(a.rotation)
    R_inv = quat_to_matrix(q_inv)
    return Pose(q_inv, -(R_inv @ a.translation))


def _so3_exp_coeffs(theta: float) -> tuple[float, float, float]:
    """(sin t/t, (1-cos t)/t^2, (t-sin t)/t^3) with series for small angles."""
    if theta < 1e-4:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / (theta * theta * theta)
    return a, b, c


def se3_exp(t: Twist) -> Pose:
    """Exponential map se(3) -> SE(3)."""
    omega = t.rotation
    v = t.translation
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    a, b, c = _so3_exp_coeffs(theta)
    R = np.eye(3) + a * K + b * (K @ K)
    V = np.eye(3) + b * K + c * (K @ K)
    return Pose(matrix_to_quat(R), V @ v)


def se3_log(p: Pose) -> Twist:
    """Logarithm map SE(3) -> se(3); requires rotation angle < pi."""
    R = quat_to_matrix(p.rotation)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta >= MAX_LOG_ANGLE:
        raise ValueError(f"se3_log undefined near angle pi (angle={theta:.9f})")
    if theta < 1e-6:
        # R - R^T vee with first-order scaling
        omega = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        omega *= 1.0 + theta * theta / 6.0
    else:
        omega = theta / (2.0 * np.sin(theta)) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        )
    K = skew(omega)
    if theta < 1e-4:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = (1.0 - theta * np.cos(theta / 2.0) / (2.0 * np.sin(theta / 2.0))) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * K + c * (K @ K)
    return Twist(omega, V_inv @ p.translation)


def project(point: np.ndarray, pose: Pose, K: CameraIntrinsics) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel (2,), camera-frame depth)."""
    m = pose.apply(np.asarray(point, dtype=np.float64))
    z = m[2]
    if z <= MIN_PROJECT_DEPTH:
        raise ValueError(f"point behind camera (z={z:.3g})")
    pixel = np.array([K.fx * m[0] / z + K.cx, K.fy * m[1] / z + K.cy])
    return pixel, float(z)


def backproject(pixel: np.ndarray, depth: float, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Inverse of project: pixel + camera depth -> world point."""
    if depth <= 0.0:
        raise ValueError(f"invalid depth {depth!r}")
    u, v = pixel
    cam = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    inv = se3_inverse(pose)
    return inv.apply(cam)
