"""Session configuration: flat key/value INI with one section per module.

Every tunable threshold lives here with its default; unknown sections or keys
are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .relocalise import RelocConfig
from .tracking import TrackingConfig


@dataclass
class ImuConfig:
    sigma_gyro: float = 2.4e-4
    sigma_accel: float = 1.9e-3
    sigma_gyro_bias: float = 1.0e-5
    sigma_accel_bias: float = 1.0e-4
    gravity_mps2: float = -9.81  # world z component


@dataclass
class VolumetricConfig:
    voxel_size_object: float = 0.01
    voxel_size_background: float = 0.02
    truncation_voxels: float = 4.0
    max_weight: float = 100.0
    raycast_near: float = 0.1
    raycast_far: float = 6.0


@dataclass
class ObjectsConfig:
    iou_threshold: float = 0.8
    min_init_depth_pixels: int = 200
    motion_sigma_gate: float = 3.0
    motion_static_ratio: float = 0.9
    keyframe_angle_deg: float = 10.0
    lost_min_rendered_px: int = 10
    refine_sigma_gate: float = 3.0
    moving_mask_dilate_px: int = 4
    max_keyframes: int = 12


@dataclass
class PipelineConfig:
    seed: int = 0
    max_imu_gap_s: float = 0.5
    eval_assoc_tol_s: float = 0.01
    init_gravity_samples: int = 20


@dataclass
class SessionConfig:
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    volumetric: VolumetricConfig = field(default_factory=VolumetricConfig)
    objects: ObjectsConfig = field(default_factory=ObjectsConfig)
    relocalisation: RelocConfig = field(default_factory=RelocConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def validate(self) -> None:
        t = self.tracking
        checks = [
            (t.pyramid_levels >= 1, "tracking.pyramid_levels must be >= 1"),
            (t.max_iterations >= 0, "tracking.max_iterations must be >= 0"),
            (t.sigma_intensity > 0, "tracking.sigma_intensity must be positive"),
            (t.cauchy_photo > 0 and t.cauchy_icp > 0 and t.cauchy_inertial > 0,
             "tracking Cauchy scales must be positive"),
            (self.imu.sigma_gyro > 0 and self.imu.sigma_accel > 0,
             "imu noise densities must be positive"),
            (self.volumetric.voxel_size_object > 0 and self.volumetric.voxel_size_background > 0,
             "voxel sizes must be positive"),
            (0 < self.objects.iou_threshold < 1, "objects.iou_threshold must be in (0,1)"),
            (0 < self.objects.motion_static_ratio <= 1, "objects.motion_static_ratio must be in (0,1]"),
            (0 < self.relocalisation.ratio_threshold < 1,
             "relocalisation.ratio_threshold must be in (0,1)"),
            (0 < self.relocalisation.ratio_test <= 1, "relocalisation.ratio_test must be in (0,1]"),
            (self.relocalisation.min_matches >= 3, "relocalisation.min_matches must be >= 3"),
            (self.objects.keyframe_angle_deg > 0, "objects.keyframe_angle_deg must be positive"),
            (self.pipeline.max_imu_gap_s > 0, "pipeline.max_imu_gap_s must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)


_SECTIONS = {
    "tracking": "tracking",
    "imu": "imu",
    "volumetric": "volumetric",
    "objects": "objects",
    "relocalisation": "relocalisation",
    "pipeline": "pipeline",
}


def _coerce(value: str, target_type):
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    return value


def load_config(path) -> SessionConfig:
    """Parse an INI config; unknown sections/keys raise ValueError."""
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as f:
        parser.read_file(f)
    cfg = SessionConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        sub = getattr(cfg, _SECTIONS[section])
        known = {f.name: f.type for f in fields(sub)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown config key {section}.{key}")
            current = getattr(sub, key)
            setattr(sub, key, _coerce(raw, type(current)))
    cfg.validate()
    return cfg


def save_config(cfg: SessionConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, attr in _SECTIONS.items():
        sub = getattr(cfg, attr)
        parser[section] = {}
        for f in fields(sub):
            v = getattr(sub, f.name)
            parser[section][f.name] = repr(v) if isinstance(v, float) else str(v)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        parser.write(fh)


def default_config() -> SessionConfig:
    return SessionConfig()
