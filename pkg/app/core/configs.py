import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.core.exceptions import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

FRAME_HEIGHT = 256
FRAME_WIDTH = 192
NUM_JOINTS = 18

# COCO keypoint constants in the 18-joint order; the neck borrows the shoulder value.
COCO_SIGMAS: List[float] = [
    0.026,  # nose
    0.079,  # neck
    0.079, 0.072, 0.062,  # right shoulder, elbow, wrist
    0.079, 0.072, 0.062,  # left shoulder, elbow, wrist
    0.107, 0.087, 0.089,  # right hip, knee, ankle
    0.107, 0.087, 0.089,  # left hip, knee, ankle
    0.025, 0.025,  # eyes
    0.035, 0.035,  # ears
]

MS_SSIM_WEIGHTS: List[float] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]


class Settings():
    """
    Process-level settings loaded from environment variables.
    """
    # --- General App Settings ---
    API_V1_STR: str = os.getenv("API_V1_STR", "/api/v1")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # --- Pipeline artifacts ---
    TRYON_CONFIG: str = os.getenv("TRYON_CONFIG", "")
    TRYON_MANIFEST: str = os.getenv("TRYON_MANIFEST", "")
    TRYON_CHECKPOINT: str = os.getenv("TRYON_CHECKPOINT", "")
    TRYON_TEXTURE_CHECKPOINT: str = os.getenv("TRYON_TEXTURE_CHECKPOINT", "")
    TRYON_DEVICE: str = os.getenv("TRYON_DEVICE", "cpu")
    TRYON_OUT_DIR: str = os.getenv("TRYON_OUT_DIR", "runs/api")

    class Config:
        case_sensitive = True


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class OksConfig(_Section):
    sigmas: List[float] = Field(default_factory=lambda: list(COCO_SIGMAS))
    scale_floor: float = Field(1.0, gt=0)
    floor: float = Field(0.1, ge=0, le=1, description="best-candidate OKS below this is reported as a pose mismatch")

    @field_validator("sigmas")
    @classmethod
    def _check_sigmas(cls, v: List[float]) -> List[float]:
        if len(v) != NUM_JOINTS:
            raise ValueError(f"oks.sigmas needs {NUM_JOINTS} entries, got {len(v)}")
        if any(s <= 0 for s in v):
            raise ValueError("oks.sigmas entries must be strictly positive")
        return v


class HeatmapConfig(_Section):
    sigma_px: float = Field(6.0, gt=0)


class WarpConfig(_Section):
    fill: float = Field(0.0, ge=0, le=1)
    regularization: float = Field(0.0, ge=0)
    anchor_corners: bool = True
    refine_texture: bool = True


class CompositeConfig(_Section):
    radius: int = Field(4, ge=0)


class NetworkConfig(_Section):
    base_channels: int = Field(64, ge=1)
    n_blocks: int = Field(9, ge=1)
    disc_channels: int = Field(64, ge=1)
    disc_layers: int = Field(3, ge=1)
    texture_channels: int = Field(32, ge=1)


class LossConfig(_Section):
    rho: float = Field(0.5, ge=0, le=1)
    l1_weight: float = Field(1.0, ge=0)
    perceptual_weight: float = Field(0.0, ge=0)


class TrainConfig(_Section):
    lr_initial: float = Field(0.002, gt=0)
    adam_beta1: float = Field(0.5, ge=0, lt=1)
    adam_beta2: float = Field(0.9999, ge=0, lt=1)
    alpha: float = Field(0.5, ge=0, description="GAN weight (lambda_GAN)")
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    epochs_general: int = Field(200, ge=1)
    epochs_specialized: int = Field(20, ge=0)
    epochs_texture: int = Field(20, ge=0)
    batch_size: int = Field(8, ge=1)
    decay_schedule: Literal["linear_after_half", "linear", "constant"] = "linear_after_half"
    seed: int = 0
    checkpoint_every: int = Field(10, ge=1)
    max_pairs: Optional[int] = Field(None, ge=1)
    device: str = "cpu"


class TextureConfig(_Section):
    lambda3: float = Field(0.0, ge=0)
    occlusion_threshold: float = Field(0.05, ge=0, le=1)
    sleeve_min_pixels: int = Field(50, ge=1)


class SegConfig(_Section):
    labelmap: Optional[Dict[str, int]] = None


class MetricsConfig(_Section):
    ssim_window: int = Field(11, ge=3)
    ssim_sigma: float = Field(1.5, gt=0)
    k1: float = Field(0.01, gt=0)
    k2: float = Field(0.03, gt=0)
    ms_ssim_weights: List[float] = Field(default_factory=lambda: list(MS_SSIM_WEIGHTS))
    is_splits: int = Field(1, ge=1)
    is_provider: Literal["inception_v3", "color_histogram"] = "inception_v3"
    max_pairs: int = Field(100, ge=1)


class IngestConfig(_Section):
    layout: Literal["flat", "grouped"] = "grouped"
    catalog_groups: int = Field(100, ge=0)
    test_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = 0


class BenchConfig(_Section):
    n_requests: int = Field(100, ge=1)
    concurrency: int = Field(1, ge=1)


class PipelineConfig(BaseModel):
    """
    Every tunable of the pipeline, grouped by module.

    Files are flat key-value YAML (``train.lr_initial: 0.002``); unknown keys are
    rejected and ``digest()`` is independent of key order.
    """
    model_config = ConfigDict(extra="forbid")

    oks: OksConfig = Field(default_factory=OksConfig)
    heatmap: HeatmapConfig = Field(default_factory=HeatmapConfig)
    warp: WarpConfig = Field(default_factory=WarpConfig)
    composite: CompositeConfig = Field(default_factory=CompositeConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    texture: TextureConfig = Field(default_factory=TextureConfig)
    seg: SegConfig = Field(default_factory=SegConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    ingest: IngestConfig = Field(default_factory=IngestConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "PipelineConfig":
        nested: Dict[str, Dict[str, Any]] = {}
        for key, value in flat.items():
            if not isinstance(key, str) or "." not in key:
                raise ConfigError(f"config key {key!r} is not of the form section.key", field=str(key))
            section, name = key.split(".", 1)
            if section not in cls.model_fields:
                raise ConfigError(f"unknown config section {section!r}", field=key)
            nested.setdefault(section, {})[name] = value
        try:
            return cls.model_validate(nested)
        except ValidationError as e:
            err = e.errors()[0]
            field = ".".join(str(p) for p in err.get("loc", ()))
            raise ConfigError(f"invalid config: {err.get('msg')}", field=field or None) from e

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> "PipelineConfig":
        flat: Dict[str, Any] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}", field="--config")
            with open(p, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
            if not isinstance(loaded, dict):
                raise ConfigError("config file must hold a flat mapping", field="--config")
            flat.update(loaded)
        if overrides:
            flat.update(overrides)
        cfg = cls.from_flat(flat)
        logger.info("Loaded pipeline config (digest=%s) from %s", cfg.digest()[:12], path or "<defaults>")
        return cfg

    def to_flat(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for section, values in self.model_dump().items():
            for k, v in values.items():
                out[f"{section}.{k}"] = v
        return out

    def digest(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Instantiate settings
config = Settings()
