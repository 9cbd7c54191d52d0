import logging
from typing import Optional

from fastapi import APIRouter, Depends, HTTPException, Request
from pydantic import ValidationError

from app.api.errors import to_http_exception
from app.core.exceptions import TryOnError
from app.schemas import Keypoint, MatchRequest, MatchResponse, Pose
from app.services.pipeline_service import TryOnPipeline

logger = logging.getLogger(__name__)
router = APIRouter()


def get_pipeline(request: Request) -> TryOnPipeline:
    """Dependency to get the loaded pipeline from app state."""
    pipeline: Optional[TryOnPipeline] = getattr(request.app.state, "pipeline", None)
    if pipeline is None:
        raise HTTPException(status_code=503, detail="pipeline is not loaded; set TRYON_MANIFEST and TRYON_CHECKPOINT")
    return pipeline


@router.post("/match", response_model=MatchResponse)
def match_pose(
    req: MatchRequest,
    pipeline: TryOnPipeline = Depends(get_pipeline),
):
    """
    Ranks catalog entries against the posted user pose by OKS.

    Optionally restricted to one garment and truncated to the top K entries.
    """
    try:
        pose = Pose(keypoints=[Keypoint(x=k.x, y=k.y, v=k.v) for k in req.keypoints])
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=f"invalid pose: {e.errors()[0].get('msg')}")

    try:
        ranked = pipeline.match(pose, garment_id=req.garment_id)
    except TryOnError as e:
        raise to_http_exception(e)

    results = ranked[:req.top_k] if req.top_k is not None else ranked
    return MatchResponse(total_candidates=len(ranked), returned=len(results), results=results)
