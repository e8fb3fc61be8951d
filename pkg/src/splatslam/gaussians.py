"""3D Gaussian primitives and their array-of-fields container.

The renderer and mapper operate on `GaussianSet`, a structure-of-arrays
store (float64) holding one anisotropic splat per row. `Gaussian3D` is the
single-splat record used at API boundaries (scene generation, file IO,
tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNSEEN_UNCERTAINTY = 1e6  # sentinel for splats that dominated no pixel yet


@dataclass
class Gaussian3D:
    """One anisotropic splat.

    mean: (3,) meters; rotation: unit quaternion (w,x,y,z); scale: (3,)
    positive std-devs in meters; opacity in [0,1]; color: RGB in [0,1];
    uncertainty: non-negative (m^2); owner_keyframe: id of the keyframe
    that spawned it.
    """

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    uncertainty: float = UNSEEN_UNCERTAINTY
    owner_keyframe: int = -1

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must be unit-norm")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must be in [0,1]")
        if self.uncertainty < 0.0:
            raise ValueError("uncertainty must be non-negative")


class GaussianSet:
    """Mutable structure-of-arrays collection of Gaussian3D."""

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))
        self.scales = np.zeros((0, 3))
        self.opacities = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.uncertainties = np.zeros(0)
        self.owners = np.zeros(0, dtype=np.int64)
        self.ids = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.means.shape[0]

    def append(self, g: Gaussian3D, gid: int) -> None:
        self.append_arrays(
            g.mean[None], g.rotation[None], g.scale[None], np.array([g.opacity]),
            g.color[None], np.array([g.uncertainty]), np.array([g.owner_keyframe]),
            np.array([gid]),
        )

    def append_arrays(self, means, rotations, scales, opacities, colors,
                      uncertainties, owners, ids) -> None:
        self.means = np.vstack([self.means, np.atleast_2d(means)])
        self.rotations = np.vstack([self.rotations, np.atleast_2d(rotations)])
        self.scales = np.vstack([self.scales, np.atleast_2d(scales)])
        self.opacities = np.concatenate([self.opacities, np.atleast_1d(opacities)])
        self.colors = np.vstack([self.colors, np.atleast_2d(colors)])
        self.uncertainties = np.concatenate([self.uncertainties, np.atleast_1d(uncertainties)])
        self.owners = np.concatenate([self.owners, np.atleast_1d(owners).astype(np.int64)])
        self.ids = np.concatenate([self.ids, np.atleast_1d(ids).astype(np.int64)])

    def keep(self, mask: np.ndarray) -> None:
        """Drop all rows where mask is False."""
        self.means = self.means[mask]
        self.rotations = self.rotations[mask]
        self.scales = self.scales[mask]
        self.opacities = self.opacities[mask]
        self.colors = self.colors[mask]
        self.uncertainties = self.uncertainties[mask]
        self.owners = self.owners[mask]
        self.ids = self.ids[mask]

    def get(self, row: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[row].copy(),
            rotation=self.rotations[row].copy(),
            scale=self.scales[row].copy(),
            opacity=float(self.opacities[row]),
            color=self.colors[row].copy(),
            uncertainty=float(self.uncertainties[row]),
            owner_keyframe=int(self.owners[row]),
        )

    def copy(self) -> "GaussianSet":
        out = GaussianSet()
        out.append_arrays(
            self.means.copy(), self.rotations.copy(), self.scales.copy(),
            self.opacities.copy(), self.colors.copy(), self.uncertainties.copy(),
            self.owners.copy(), self.ids.copy(),
        )
        return out

    def validate(self) -> None:
        """Raise if any per-splat invariant is broken."""
        if len(self) == 0:
            return
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("non-unit quaternion in gaussian set")
        if np.any(self.scales <= 0):
            raise ValueError("non-positive scale in gaussian set")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacity out of [0,1] in gaussian set")
        if np.any(self.uncertainties < 0):
            raise ValueError("negative uncertainty in gaussian set")
