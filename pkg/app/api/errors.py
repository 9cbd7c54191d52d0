import logging

from fastapi import HTTPException

from app.core.exceptions import (
    CheckpointError,
    ContractError,
    DomainError,
    ManifestError,
    NoCandidatesError,
    NoGarmentRegionError,
    PoseParseError,
    TryOnError,
)

logger = logging.getLogger(__name__)

_CLIENT_ERRORS = (PoseParseError, DomainError, ContractError, ManifestError, NoGarmentRegionError, CheckpointError)


def to_http_exception(e: TryOnError) -> HTTPException:
    """400 for bad inputs, 404 for an unknown garment, 500 for everything else."""
    if isinstance(e, NoCandidatesError):
        return HTTPException(status_code=404, detail=e.to_record())
    if isinstance(e, _CLIENT_ERRORS):
        return HTTPException(status_code=400, detail=e.to_record())
    logger.error("Pipeline error: %s", e.to_record())
    return HTTPException(status_code=500, detail=e.to_record())
