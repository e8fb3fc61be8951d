"""Dense RGB-D SLAM on 3D Gaussian submaps.

Frame-to-model tracking against a differentiable splat renderer,
uncertainty-driven submap optimization, and hierarchical loop closure
(detection, pose-graph optimization, keyframe-centric map deformation).
"""

from .geometry import CameraIntrinsics, Pose, Twist
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "Pose", "Twist", "KERNEL_BACKEND", "__version__"]
