import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator


class MetricReport(BaseModel):
    metric: str
    value: float
    std: Optional[float] = None
    sample_count: int = Field(..., ge=1)
    config_digest: str = Field(..., min_length=1)


class RequestMix(BaseModel):
    garment_ids: Optional[List[str]] = None
    seed: int = 0


class RequestTrace(BaseModel):
    index: int
    garment_id: str
    user_record: Optional[str] = None
    ok: bool
    seconds: float
    stage_seconds: Dict[str, float] = Field(default_factory=dict)
    error: Optional[str] = None


class ThroughputStats(BaseModel):
    total_requests: int
    succeeded: int
    failed: int
    wall_time: float
    amortized_seconds: float
    stage_seconds: Dict[str, float] = Field(default_factory=dict)
    stage_shares: Dict[str, float] = Field(default_factory=dict)
    concurrency: int = 1
    failures: List[RequestTrace] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "ThroughputStats":
        if self.succeeded and not math.isclose(self.amortized_seconds * self.succeeded, self.wall_time, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("amortized_seconds must equal wall_time / succeeded")
        return self
