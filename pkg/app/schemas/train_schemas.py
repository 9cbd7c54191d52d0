from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH
from app.schemas.pose_schemas import Pose

SCHEMA_VERSION = 1


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(0.5, ge=0, description="GAN weight")
    rho: float = Field(0.5, ge=0, le=1, description="appearance vs shape discriminator balance")
    l1_weight: float = Field(1.0, ge=0)
    perceptual_weight: float = Field(0.0, ge=0)


class TrainingPair(BaseModel):
    """Source and target views sharing one garment identity."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    source_image: np.ndarray
    source_pose: Pose
    target_image: np.ndarray
    target_pose: Pose
    source_identity: str
    target_identity: str

    @model_validator(mode="after")
    def _check(self) -> "TrainingPair":
        for name in ("source_image", "target_image"):
            img = getattr(self, name)
            if img.shape != (FRAME_HEIGHT, FRAME_WIDTH, 3):
                raise ValueError(f"{name} must be {FRAME_HEIGHT}x{FRAME_WIDTH}x3, got {img.shape}")
        if self.source_identity != self.target_identity:
            raise ValueError(
                f"pair identities differ: {self.source_identity!r} vs {self.target_identity!r}"
            )
        return self


class TextureTriplet(BaseModel):
    """Posed model wearing the garment, the user, the user's mask and the try-on ground truth."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    posed_model: np.ndarray
    user: np.ndarray
    user_mask: np.ndarray
    ground_truth: np.ndarray


class LossRecord(BaseModel):
    step: int
    epoch: int
    lr: float
    generator_loss: float
    discriminator_loss: float
    l1_loss: float
    wall_time: float
    ok: bool = True
    diagnostic: Optional[str] = None


class CheckpointMeta(BaseModel):
    schema_version: int = SCHEMA_VERSION
    phase: Literal["general", "specialized", "texture"]
    epoch: int
    step: int
    architecture: Dict[str, Any]
    loss_weights: Dict[str, float]
    param_count: int
    content_hash: str
    parent_hash: Optional[str] = None
    config_digest: Optional[str] = None
    seed: Optional[int] = None
    rho_placement: str = "weighted_sum_inside_gan_loss"
    lr_history: List[float] = Field(default_factory=list)


class CheckpointRef(BaseModel):
    path: str
    meta: CheckpointMeta
