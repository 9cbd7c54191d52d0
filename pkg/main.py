import logging
import uvicorn
from contextlib import asynccontextmanager
from fastapi import FastAPI
from app import matcher, tryon, config, PipelineConfig, TryOnPipeline

logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(message)s")
logger = logging.getLogger(__name__)

@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Loads the catalog and the networks once at startup.
    Without TRYON_MANIFEST and TRYON_CHECKPOINT the service starts unloaded and answers 503.
    """
    # STARTUP
    logger.info("Application startup (lifespan)...")
    app.state.pipeline = None
    if config.TRYON_MANIFEST and config.TRYON_CHECKPOINT:
        pipeline_config = PipelineConfig.load(config.TRYON_CONFIG or None)
        app.state.pipeline = TryOnPipeline.from_paths(
            config.TRYON_MANIFEST,
            config.TRYON_CHECKPOINT,
            pipeline_config,
            config.TRYON_TEXTURE_CHECKPOINT or None,
            device=config.TRYON_DEVICE,
        )
        logger.info("Try-on pipeline loaded on device '%s'.", config.TRYON_DEVICE)
    else:
        logger.warning("TRYON_MANIFEST or TRYON_CHECKPOINT not set; pipeline endpoints will return 503.")

    try:
        yield
    finally:
        # SHUTDOWN
        logger.info("Application shutdown (lifespan)...")
        app.state.pipeline = None

# Create FastAPI app with lifespan
app = FastAPI(
    title="Pose-Transfer Try-On Service",
    description="An API for matching user poses against a garment catalog and dressing users in catalog garments.",
    version="1.0.0",
    lifespan=lifespan
)

# --- API Routers ---
app.include_router(matcher, prefix=config.API_V1_STR, tags=["Pose Matcher"])
app.include_router(tryon, prefix=config.API_V1_STR, tags=["Try-On"])
if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8000,
        reload=True
        )
