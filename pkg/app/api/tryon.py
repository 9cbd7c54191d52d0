import logging
from pathlib import Path

from fastapi import APIRouter, Depends

from app.api.errors import to_http_exception
from app.api.matcher import get_pipeline
from app.core.configs import config
from app.core.exceptions import ContractError, TryOnError
from app.schemas import TransferRequest, TransferResponse
from app.services.dataset_service import load_user_files
from app.services.pipeline_service import TryOnPipeline, inputs_digest, write_result

logger = logging.getLogger(__name__)
router = APIRouter()


@router.post("/transfer", response_model=TransferResponse)
def transfer_garment(
    req: TransferRequest,
    pipeline: TryOnPipeline = Depends(get_pipeline),
):
    """
    Dresses the user in the requested catalog garment.

    Reads the user's image, pose and mask from server-side paths and writes the
    final image with all intermediates under TRYON_OUT_DIR.
    """
    try:
        user = load_user_files(
            req.user_image_path, req.user_pose_path, req.user_mask_path,
            labelmap=pipeline.config.seg.labelmap,
        )
        result = pipeline.run_transfer(user, req.garment_id)
    except TryOnError as e:
        raise to_http_exception(e)
    except OSError as e:
        raise to_http_exception(ContractError(f"cannot read user inputs: {e}", field="user_image_path"))

    out_dir = write_result(result, Path(config.TRYON_OUT_DIR) / inputs_digest(user, req.garment_id, result.config_digest))
    logger.info("Transfer for garment %s written to %s (%s)", req.garment_id, out_dir, result.method.kind.value)
    return TransferResponse(
        output_dir=str(out_dir),
        selected=result.selected,
        method=result.method,
        stage_seconds=result.stage_seconds,
        warnings=result.warnings,
    )
