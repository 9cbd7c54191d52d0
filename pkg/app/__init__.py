from .api.matcher import router as matcher
from .api.tryon import router as tryon
from .core.configs import PipelineConfig, config
from .services.pipeline_service import TryOnPipeline, run_transfer, write_result

__all__ = [
    "matcher",
    "tryon",
    "config",
    "PipelineConfig",
    "TryOnPipeline",
    "run_transfer",
    "write_result",
    ]
