from enum import Enum, IntEnum
from typing import Any, Tuple

from pydantic import BaseModel, ConfigDict, Field


class SegLabel(IntEnum):
    """Canonical human-parsing label ids (see app/assets/labelmap.yaml)."""
    BACKGROUND = 0
    HAIR = 1
    FACE = 2
    UPPER_CLOTHES = 3
    LOWER_CLOTHES = 4
    LEFT_ARM = 5
    RIGHT_ARM = 6
    LEFT_LEG = 7
    RIGHT_LEG = 8
    ACCESSORIES = 9
    OTHER = 10


GARMENT_LABELS: Tuple[SegLabel, ...] = (SegLabel.UPPER_CLOTHES,)
OCCLUDER_LABELS: Tuple[SegLabel, ...] = (SegLabel.HAIR, SegLabel.ACCESSORIES)
ARM_LABELS: Tuple[SegLabel, ...] = (SegLabel.LEFT_ARM, SegLabel.RIGHT_ARM)
SKIN_LABELS: Tuple[SegLabel, ...] = (SegLabel.FACE, SegLabel.LEFT_ARM, SegLabel.RIGHT_ARM)
PROTECTED_LABELS: Tuple[SegLabel, ...] = (SegLabel.HAIR, SegLabel.FACE, SegLabel.ACCESSORIES)


class TransferMethodKind(str, Enum):
    COPY_PASTE = "copy_paste"
    TEXTURE_TRANSLATION = "texture_translation"


class TransferMethod(BaseModel):
    kind: TransferMethodKind
    score: float = Field(..., ge=0, le=1, description="occlusion ratio of the garment region")
    threshold: float
    garment_pixels: int
    occluded_pixels: int


class WarpLossTerms(BaseModel):
    """Tensors (N, 3, H, W) in a shared range plus (lambda1, lambda2, lambda3)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    I_gt: Any
    I_stn_0: Any
    I_stn_1: Any
    lambdas: Tuple[float, float, float] = (1.0, 1.0, 0.0)
