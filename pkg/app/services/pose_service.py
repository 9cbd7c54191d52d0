import json
import logging
import math
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH, NUM_JOINTS, OksConfig
from app.core.exceptions import DomainError, NoCandidatesError, PoseParseError
from app.schemas import CatalogEntry, HeatmapStack, Keypoint, ParseReport, Pose, RankedCandidate, SigmaTable
from app.schemas.pose_schemas import JOINT_NAMES, ParseIssue

logger = logging.getLogger(__name__)


# -----------------------
# Annotation parsing
# -----------------------
def _coerce_number(value: Any, field: str) -> float:
    if isinstance(value, bool):
        raise PoseParseError(f"non-numeric value at {field}: {value!r}", field=field)
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise PoseParseError(f"non-numeric value at {field}: {value!r}", field=field)
    if not math.isfinite(out):
        raise PoseParseError(f"non-finite value at {field}: {value!r}", field=field)
    return out


def _extract_triplets(record: Any) -> List[Any]:
    """
    Accepts ``{"keypoints": [[x, y, v], ...]}`` or the OpenPose-style
    ``{"pose_keypoints_2d": [x0, y0, v0, x1, ...]}``.
    """
    if not isinstance(record, dict):
        raise PoseParseError("pose record must be a JSON object", field="record")
    if "keypoints" in record:
        triplets = record["keypoints"]
        if not isinstance(triplets, list):
            raise PoseParseError("keypoints must be a list of [x, y, v] triplets", field="keypoints")
        return triplets
    if "pose_keypoints_2d" in record:
        flat = record["pose_keypoints_2d"]
        if not isinstance(flat, list) or len(flat) % 3 != 0:
            raise PoseParseError("pose_keypoints_2d must be a flat list of x, y, v values", field="pose_keypoints_2d")
        return [flat[i:i + 3] for i in range(0, len(flat), 3)]
    raise PoseParseError("pose record has no 'keypoints' field", field="keypoints")


def parse_keypoint_array(annotation_text: str) -> np.ndarray:
    """Validated (18, 3) array of x, y, v with no frame check; used for raw-resolution annotations."""
    try:
        record = json.loads(annotation_text)
    except json.JSONDecodeError as e:
        raise PoseParseError(f"malformed pose record: {e.msg}", field="record")

    triplets = _extract_triplets(record)
    if len(triplets) != NUM_JOINTS:
        raise PoseParseError(f"expected {NUM_JOINTS} joints, got {len(triplets)}", field="keypoints")

    out = np.zeros((NUM_JOINTS, 3), dtype=np.float64)
    for i, t in enumerate(triplets):
        if not isinstance(t, (list, tuple)) or len(t) != 3:
            raise PoseParseError(f"joint {i} must be an [x, y, v] triplet", field=f"keypoints[{i}]")
        x = _coerce_number(t[0], f"keypoints[{i}].x")
        y = _coerce_number(t[1], f"keypoints[{i}].y")
        v = _coerce_number(t[2], f"keypoints[{i}].v")
        if v not in (0.0, 1.0, 2.0):
            raise PoseParseError(f"visibility flag must be 0, 1 or 2, got {t[2]!r}", field=f"keypoints[{i}].v")
        out[i] = (x, y, v)
    return out


def load_pose_with_report(annotation_text: str) -> Tuple[Pose, ParseReport]:
    """Parse one pose record; labeled joints outside the frame are clamped and reported."""
    arr = parse_keypoint_array(annotation_text)
    report = ParseReport()
    keypoints: List[Keypoint] = []
    for i, (x, y, v_raw) in enumerate(arr):
        v = int(v_raw)
        x, y = float(x), float(y)
        if v > 0:
            cx = min(max(x, 0.0), FRAME_WIDTH - 1.0)
            cy = min(max(y, 0.0), FRAME_HEIGHT - 1.0)
            if (cx, cy) != (x, y):
                report.clamped.append(ParseIssue(
                    field=f"keypoints[{i}]",
                    message=f"{JOINT_NAMES[i]} ({x}, {y}) clamped to ({cx}, {cy})",
                ))
            x, y = cx, cy
        keypoints.append(Keypoint(x=x, y=y, v=v))
    return Pose(keypoints=keypoints), report


def load_pose(annotation_text: str) -> Pose:
    pose, report = load_pose_with_report(annotation_text)
    for issue in report.clamped:
        logger.warning("Pose clamp at %s: %s", issue.field, issue.message)
    return pose


def dump_pose(pose: Pose) -> str:
    return json.dumps({"keypoints": [[kp.x, kp.y, kp.v] for kp in pose.keypoints]})


# -----------------------
# Similarity
# -----------------------
def keypoint_scale(pose: Pose, floor: float = 1.0) -> float:
    """sqrt(w * h) of the tight box around the visible joints, never below ``floor``."""
    vis = pose.visibility() > 0
    if not vis.any():
        raise DomainError("no visible keypoints")
    xy = pose.xy()[vis]
    w = float(xy[:, 0].max() - xy[:, 0].min())
    h = float(xy[:, 1].max() - xy[:, 1].min())
    return max(math.sqrt(w * h), floor)


def oks(user: Pose, candidate: Pose, scale: float, sigmas: SigmaTable) -> float:
    """Object keypoint similarity gated on the user's visibility flags."""
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    gate = user.visibility() > 0
    if not gate.any():
        raise DomainError("no visible keypoints")
    k = sigmas.as_array()
    # unlabeled candidate joints may sit anywhere; distances use frame-clamped coordinates
    cand = np.clip(candidate.xy(), 0.0, [FRAME_WIDTH - 1.0, FRAME_HEIGHT - 1.0])
    d2 = np.sum((user.xy() - cand) ** 2, axis=1)
    e = np.exp(-d2 / (2.0 * (scale * k) ** 2))
    return float(np.sum(e[gate]) / np.count_nonzero(gate))


class PoseMatcher:
    """
    Ranks catalog entries against a user pose by OKS.

    The catalog is treated as immutable; ``select`` is safe to call from any thread.
    """

    def __init__(self, catalog: Sequence[CatalogEntry], oks_config: Optional[OksConfig] = None):
        self.catalog = tuple(catalog)
        self.oks_config = oks_config or OksConfig()
        self.sigmas = SigmaTable(k=self.oks_config.sigmas)

    def scale_for(self, user: Pose) -> float:
        return keypoint_scale(user, self.oks_config.scale_floor)

    def rank(self, user: Pose, garment_id: Optional[str] = None, top_k: Optional[int] = None) -> List[RankedCandidate]:
        return rank_catalog(user, self.catalog, self.scale_for(user), self.sigmas, garment_id=garment_id, top_k=top_k)

    def select(self, user: Pose, garment_id: str) -> Tuple[int, CatalogEntry, float]:
        return select_model_image_indexed(user, self.catalog, garment_id, self.scale_for(user), self.sigmas)


def select_model_image_indexed(
    user: Pose,
    catalog: Sequence[CatalogEntry],
    garment_id: str,
    scale: float,
    sigmas: SigmaTable,
) -> Tuple[int, CatalogEntry, float]:
    best_idx: Optional[int] = None
    best_score = -math.inf
    for i, entry in enumerate(catalog):
        if entry.garment_id != garment_id:
            continue
        score = oks(user, entry.pose, scale, sigmas)
        # strict comparison keeps the lowest catalog index on ties
        if score > best_score:
            best_idx, best_score = i, score
    if best_idx is None:
        raise NoCandidatesError(f"no candidates for garment {garment_id!r}", field="garment_id")
    return best_idx, catalog[best_idx], best_score


def select_model_image(
    user: Pose,
    catalog: Sequence[CatalogEntry],
    garment_id: str,
    scale: float,
    sigmas: SigmaTable,
) -> Tuple[CatalogEntry, float]:
    _, entry, score = select_model_image_indexed(user, catalog, garment_id, scale, sigmas)
    return entry, score


def rank_catalog(
    user: Pose,
    catalog: Sequence[CatalogEntry],
    scale: float,
    sigmas: SigmaTable,
    garment_id: Optional[str] = None,
    top_k: Optional[int] = None,
) -> List[RankedCandidate]:
    scored = [
        (i, entry, oks(user, entry.pose, scale, sigmas))
        for i, entry in enumerate(catalog)
        if garment_id is None or entry.garment_id == garment_id
    ]
    if not scored:
        raise NoCandidatesError(f"no candidates for garment {garment_id!r}", field="garment_id")

    # stable sort keeps catalog order among equal scores
    scored.sort(key=lambda t: -t[2])
    if top_k is not None:
        scored = scored[:top_k]
    return [
        RankedCandidate(
            index=i,
            record_id=entry.record_id,
            garment_id=entry.garment_id,
            model_id=entry.model_id,
            score=score,
            rank=rank_position,
        )
        for rank_position, (i, entry, score) in enumerate(scored, start=1)
    ]


# -----------------------
# Heatmap encoding
# -----------------------
def encode_heatmaps(pose: Pose, sigma_px: float, height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH) -> HeatmapStack:
    """One Gaussian channel per joint, peak 1 at the rounded joint pixel; invisible joints give zeros."""
    if not sigma_px > 0:
        raise DomainError(f"sigma_px must be positive, got {sigma_px}")
    channels = np.zeros((NUM_JOINTS, height, width), dtype=np.float32)
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    denom = 2.0 * sigma_px * sigma_px
    for i, kp in enumerate(pose.keypoints):
        if kp.v == 0:
            continue
        cx = float(np.clip(np.round(kp.x), 0, width - 1))
        cy = float(np.clip(np.round(kp.y), 0, height - 1))
        channels[i] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / denom)
    return HeatmapStack(channels=channels, sigma_px=float(sigma_px))
