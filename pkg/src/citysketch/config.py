"""Configuration dataclasses shared across data generation, training and inference.

Everything that affects generated data or trained weights lives here so a single
hash of the config pins provenance in manifests, checkpoints and reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field


@dataclass
class SceneParams:
    """Procedural city-block generation parameters. Units are meters."""

    extent: float = 100.0          # side length of the square ground patch
    n_buildings_min: int = 4
    n_buildings_max: int = 8
    height_min: float = 5.0
    height_max: float = 60.0
    side_min: float = 8.0          # footprint edge lengths
    side_max: float = 28.0
    min_area: float = 64.0
    l_shape_prob: float = 0.35     # chance a footprint gets a corner cut
    margin: float = 4.0            # keep footprints off the patch border
    gap: float = 3.0               # minimum clearance between footprints
    max_attempts: int = 200        # rejection-sampling budget per building
    height_scale_min: float = 0.5  # vertical augmentation range
    height_scale_max: float = 1.5


@dataclass
class CameraParams:
    """Fixed capture rig. The perspective camera stands back from the patch so
    the midpoint of its near/far range lands on the patch center; the top-down
    ortho camera is centered there."""

    height: float = 80.0
    pitch_deg: float = -30.0
    vfov_deg: float = 60.0
    near: float = 1.0
    far: float = 250.0
    yaw_deg: float = 90.0              # canonical rig looks along +y
    ortho_height: float = 120.0        # reference plane for top-down depth
    coverage_margin: float = 10.0      # ortho half-extent = extent/2 + margin
    extra_view_yaw_deg: float = 135.0  # preconfigured second perspective view
    randomize_yaw: bool = False        # per-scene yaw draw for training data


@dataclass
class SketchParams:
    depth_jump_rel: float = 0.02     # relative depth discontinuity threshold
    td_depth_jump_rel: float = 0.02  # same threshold for the top-down view
    crease_deg: float = 20.0         # normal crease angle threshold
    # augmentation
    p_drop: float = 0.15
    drop_block: int = 4
    jitter_px: int = 1
    width_change_prob: float = 0.3  # split evenly between dilate and erode


@dataclass
class RasterConfig:
    resolution: int = 256          # all per-view maps are resolution x resolution
    heightfield_n: int = 128       # top-down completion / mesh grid


@dataclass
class NetConfig:
    base_width: int = 32
    levels: int = 3                # encoder depth of the nested U-Net trunks
    scales: int = 4                # multi-resolution depth outputs
    n_planes: int = 32             # occupancy volume depth planes
    occupancy_magnitude: float = 50.0
    latent_downsample: int = 8
    latent_channels: int = 4
    cond_width: int = 64           # channels after the conditioning heads
    denoiser_width: int = 64
    time_embed_dim: int = 128
    ae_width: int = 32

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.scales > self.levels + 1:
            raise ValueError("scales cannot exceed levels + 1")
        if self.latent_downsample & (self.latent_downsample - 1):
            raise ValueError("latent_downsample must be a power of two")


@dataclass
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sample_steps: int = 50


@dataclass
class LossWeights:
    depth: float = 1.0
    grad: float = 1.0
    normal: float = 1.0
    mask: float = 1.0
    ground_class: float = 1.0      # BCE weight for ground/background pixels
    building_class: float = 20.0   # BCE weight for building/foreground pixels
    diff_l1: float = 1.0
    diff_l2: float = 1.0
    diff_normal: float = 1.0
    kl: float = 1e-4


@dataclass
class DepthRange:
    """Fixed affine normalization for top-down depths fed to the latent models."""

    d_min: float = 60.0
    d_max: float = 120.0

    def normalize(self, d):
        return 2.0 * (d - self.d_min) / (self.d_max - self.d_min) - 1.0

    def denormalize(self, d):
        return (d + 1.0) * 0.5 * (self.d_max - self.d_min) + self.d_min


@dataclass
class PipelineConfig:
    """Bundle of everything data generation and the models agree on."""

    scene: SceneParams = field(default_factory=SceneParams)
    camera: CameraParams = field(default_factory=CameraParams)
    sketch: SketchParams = field(default_factory=SketchParams)
    raster: RasterConfig = field(default_factory=RasterConfig)
    net: NetConfig = field(default_factory=NetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    depth_range: DepthRange = field(default_factory=DepthRange)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            scene=SceneParams(**d.get("scene", {})),
            camera=CameraParams(**d.get("camera", {})),
            sketch=SketchParams(**d.get("sketch", {})),
            raster=RasterConfig(**d.get("raster", {})),
            net=NetConfig(**d.get("net", {})),
            schedule=ScheduleConfig(**d.get("schedule", {})),
            loss=LossWeights(**d.get("loss", {})),
            depth_range=DepthRange(**d.get("depth_range", {})),
        )

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_config() -> PipelineConfig:
    return PipelineConfig()


def tiny_config() -> PipelineConfig:
    """Desk-scale profile: small rasters and narrow trunks so the full training
    matrix (ablations included) runs on a couple of CPU cores."""

    cfg = PipelineConfig()
    cfg.raster = RasterConfig(resolution=64, heightfield_n=64)
    # at 64 px the per-pixel depth slope of visible ground approaches 5-6%,
    # so the perspective discontinuity threshold has to sit above it
    cfg.sketch.depth_jump_rel = 0.08
    cfg.net = NetConfig(
        base_width=16,
        levels=3,
        scales=4,
        n_planes=16,
        latent_downsample=4,
        denoiser_width=64,
        cond_width=64,
        ae_width=32,
    )
    return cfg


def pitch_rad(cam: CameraParams) -> float:
    return math.radians(cam.pitch_deg)
