from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.configs import COCO_SIGMAS, FRAME_HEIGHT, FRAME_WIDTH, NUM_JOINTS

JOINT_NAMES: Tuple[str, ...] = (
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
)


class Keypoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    v: int = Field(..., ge=0, le=2, description="0 = unlabeled, 1 = labeled occluded, 2 = labeled visible")


class Pose(BaseModel):
    """18 body joints in the fixed OpenPose order, pixel coordinates in the 256x192 frame."""
    model_config = ConfigDict(frozen=True)

    keypoints: List[Keypoint]

    @field_validator("keypoints")
    @classmethod
    def _check_count(cls, v: List[Keypoint]) -> List[Keypoint]:
        if len(v) != NUM_JOINTS:
            raise ValueError(f"expected {NUM_JOINTS} joints, got {len(v)}")
        return v

    @model_validator(mode="after")
    def _check_frame(self) -> "Pose":
        for i, kp in enumerate(self.keypoints):
            if kp.v > 0 and not (0 <= kp.x < FRAME_WIDTH and 0 <= kp.y < FRAME_HEIGHT):
                raise ValueError(f"keypoint {JOINT_NAMES[i]} at ({kp.x}, {kp.y}) is outside the frame")
        return self

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Pose":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(keypoints=[Keypoint(x=float(x), y=float(y), v=int(v)) for x, y, v in arr])

    def xy(self) -> np.ndarray:
        return np.array([[kp.x, kp.y] for kp in self.keypoints], dtype=np.float64)

    def visibility(self) -> np.ndarray:
        return np.array([kp.v for kp in self.keypoints], dtype=np.int64)

    def to_array(self) -> np.ndarray:
        return np.array([[kp.x, kp.y, kp.v] for kp in self.keypoints], dtype=np.float64)

    def translated(self, dx: float, dy: float) -> "Pose":
        return Pose(keypoints=[Keypoint(x=kp.x + dx, y=kp.y + dy, v=kp.v) for kp in self.keypoints])


class ParseIssue(BaseModel):
    field: str
    message: str


class ParseReport(BaseModel):
    clamped: List[ParseIssue] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.clamped


class SigmaTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: List[float] = Field(default_factory=lambda: list(COCO_SIGMAS))

    @field_validator("k")
    @classmethod
    def _check(cls, v: List[float]) -> List[float]:
        if len(v) != NUM_JOINTS:
            raise ValueError(f"sigma table needs {NUM_JOINTS} entries, got {len(v)}")
        if any(s <= 0 for s in v):
            raise ValueError("sigma table entries must be strictly positive")
        return v

    def as_array(self) -> np.ndarray:
        return np.asarray(self.k, dtype=np.float64)


class HeatmapStack(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    channels: np.ndarray  # (18, H, W) float32
    sigma_px: float = Field(..., gt=0)


class CatalogEntry(BaseModel):
    """One model photograph of the garment collection."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    image: np.ndarray  # (H, W, 3) float in [0, 1]
    pose: Pose
    seg_mask: np.ndarray  # (H, W) uint8 canonical label ids
    garment_id: str
    model_id: str
    record_id: Optional[str] = None

    @model_validator(mode="after")
    def _check_frame(self) -> "CatalogEntry":
        if self.image.shape != (FRAME_HEIGHT, FRAME_WIDTH, 3):
            raise ValueError(f"catalog image must be {FRAME_HEIGHT}x{FRAME_WIDTH}x3, got {self.image.shape}")
        if self.seg_mask.shape != (FRAME_HEIGHT, FRAME_WIDTH):
            raise ValueError(f"catalog mask must be {FRAME_HEIGHT}x{FRAME_WIDTH}, got {self.seg_mask.shape}")
        return self


class RankedCandidate(BaseModel):
    index: int
    record_id: Optional[str]
    garment_id: str
    model_id: str
    score: float
    rank: int
