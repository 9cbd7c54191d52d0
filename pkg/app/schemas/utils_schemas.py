from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.schemas.pose_schemas import Pose, RankedCandidate
from app.schemas.texture_schemas import TransferMethod
from app.schemas.warp_schemas import TPSDiagnostics

SplitTag = Literal["train", "test", "catalog"]


class ManifestRecord(BaseModel):
    record_id: str
    image_path: str
    pose_path: str
    seg_path: str
    garment_id: str
    model_id: str
    split: SplitTag


class Manifest(BaseModel):
    root: str
    layout: Literal["flat", "grouped"]
    seed: int
    records: List[ManifestRecord] = Field(default_factory=list)
    skipped: List[Dict[str, str]] = Field(default_factory=list)

    def groups(self) -> Dict[str, List[ManifestRecord]]:
        out: Dict[str, List[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.garment_id, []).append(r)
        return out

    def by_split(self, split: SplitTag) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == split]


class UserInput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    image: np.ndarray
    pose: Pose
    seg_mask: np.ndarray
    record_id: Optional[str] = None


class SelectedCandidate(BaseModel):
    index: int
    record_id: Optional[str]
    garment_id: str
    model_id: str
    score: float


class TransferResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    final_image: np.ndarray
    selected: SelectedCandidate
    posed_model: np.ndarray
    refined_model: np.ndarray
    posed_model_mask: np.ndarray
    tps: TPSDiagnostics
    method: TransferMethod
    sleeve_pixels: int = 0
    stage_seconds: Dict[str, float] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)
    config_digest: str


# --- API Schemas ---

class KeypointIn(BaseModel):
    x: float
    y: float
    v: int = Field(..., ge=0, le=2)


class MatchRequest(BaseModel):
    keypoints: List[KeypointIn] = Field(..., min_length=18, max_length=18)
    garment_id: Optional[str] = None
    top_k: Optional[int] = Field(None, ge=1, description="Return top K catalog entries")


class MatchResponse(BaseModel):
    total_candidates: int
    returned: int
    results: List[RankedCandidate]


class TransferRequest(BaseModel):
    user_image_path: str
    user_pose_path: str
    user_mask_path: str
    garment_id: str


class TransferResponse(BaseModel):
    output_dir: str
    selected: SelectedCandidate
    method: TransferMethod
    stage_seconds: Dict[str, float]
    warnings: List[str]
