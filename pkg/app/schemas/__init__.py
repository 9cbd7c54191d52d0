from app.schemas.pose_schemas import JOINT_NAMES, CatalogEntry, HeatmapStack, Keypoint, ParseReport, Pose, RankedCandidate, SigmaTable
from app.schemas.warp_schemas import TPSDiagnostics, TPSTransform
from app.schemas.texture_schemas import SegLabel, TransferMethod, TransferMethodKind, WarpLossTerms
from app.schemas.train_schemas import CheckpointMeta, CheckpointRef, LossRecord, LossWeights, TextureTriplet, TrainingPair
from app.schemas.metric_schemas import MetricReport, RequestMix, RequestTrace, ThroughputStats
from app.schemas.utils_schemas import (
    Manifest,
    ManifestRecord,
    MatchRequest,
    MatchResponse,
    SelectedCandidate,
    TransferRequest,
    TransferResponse,
    TransferResult,
    UserInput,
)
__all__ = [
    "JOINT_NAMES",
    "CatalogEntry",
    "HeatmapStack",
    "Keypoint",
    "ParseReport",
    "Pose",
    "RankedCandidate",
    "SigmaTable",
    "TPSDiagnostics",
    "TPSTransform",
    "SegLabel",
    "TransferMethod",
    "TransferMethodKind",
    "WarpLossTerms",
    "CheckpointMeta",
    "CheckpointRef",
    "LossRecord",
    "LossWeights",
    "TextureTriplet",
    "TrainingPair",
    "MetricReport",
    "RequestMix",
    "RequestTrace",
    "ThroughputStats",
    "Manifest",
    "ManifestRecord",
    "MatchRequest",
    "MatchResponse",
    "SelectedCandidate",
    "TransferRequest",
    "TransferResponse",
    "TransferResult",
    "UserInput",
]
