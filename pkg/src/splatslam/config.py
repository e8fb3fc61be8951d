"""System configuration: dataclass defaults, TOML loading, CLI overrides.

Defaults reproduce the published operating point (densify alpha threshold
0.6, local loop similarity 0.8, five keyframes per optimization round,
unit loss weights with SSIM mix 0.2).
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from typing import Dict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .geometry import CameraIntrinsics
from .loop import GEOMETRY_OVERLAP, LOCAL_SIMILARITY, RECENCY_WINDOW
from .mapper import MapperConfig
from .tracker import TrackerConfig


@dataclass
class LoopConfig:
    enabled: bool = True
    local_similarity: float = LOCAL_SIMILARITY
    geometry_overlap: float = GEOMETRY_OVERLAP
    recency_window: int = RECENCY_WINDOW
    refine_iterations: int = 50


@dataclass
class DatasetConfig:
    kind: str = "synthetic"           # synthetic | tum
    path: str = ""                    # TUM directory when kind == "tum"
    seed: int = 0
    gaussian_count: int = 80
    trajectory: str = "circle"
    frames: int = 120
    depth_noise: float = 0.0
    color_noise: float = 0.0
    closed_loop: bool = True
    fx: float = 48.0
    fy: float = 48.0
    cx: float = 31.5
    cy: float = 23.5
    width: int = 64
    height: int = 48

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class SystemConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 0
    out_dir: str = "out"
    deterministic: bool = True
    keyframe_selection: bool = True   # False: random-schedule ablation

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "tracker": TrackerConfig,
    "mapper": MapperConfig,
    "loop": LoopConfig,
    "dataset": DatasetConfig,
}


def config_from_dict(data: Dict) -> SystemConfig:
    cfg = SystemConfig()
    for section, cls in _SECTIONS.items():
        if section in data:
            fields = {f.name for f in dataclasses.fields(cls)}
            unknown = set(data[section]) - fields
            if unknown:
                raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
            setattr(cfg, section, cls(**data[section]))
    for key in ("seed", "out_dir", "deterministic", "keyframe_selection"):
        if key in data:
            setattr(cfg, key, data[key])
    known = set(_SECTIONS) | {"seed", "out_dir", "deterministic", "keyframe_selection"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def load_config(path) -> SystemConfig:
    with open(path, "rb") as f:
        data = tomllib.load(f)
    return config_from_dict(data)
