import itertools
import logging
import os
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH, IngestConfig, PipelineConfig
from app.core.exceptions import ManifestError, PoseParseError
from app.helpers.preprocessor import (
    crop_resize_image,
    crop_resize_keypoints,
    crop_resize_mask,
    load_image,
    load_mask,
    remap_labels,
    save_image,
    save_mask,
)
from app.schemas import CatalogEntry, Manifest, ManifestRecord, Pose, TextureTriplet, TrainingPair, UserInput
from app.schemas.pose_schemas import JOINT_NAMES
from app.schemas.utils_schemas import SplitTag
from app.services.pose_service import dump_pose, load_pose, parse_keypoint_array
from app.services.texture_service import garment_region

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
MANIFEST_NAME = "manifest.json"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_SUFFIX = "_mask"


# -----------------------
# Source layouts
# -----------------------
def _is_image(p: Path) -> bool:
    return p.suffix.lower() in IMAGE_SUFFIXES and not p.stem.endswith(MASK_SUFFIX)


def _sidecars(img: Path) -> Tuple[Path, Path]:
    return img.with_suffix(".json"), img.with_name(f"{img.stem}{MASK_SUFFIX}.png")


def _scan_grouped(source: Path) -> Iterator[Tuple[Path, str, str, str]]:
    """``<garment_id>/<model_id>_<view>.png`` with ``.json`` pose and ``_mask.png`` beside it."""
    for gdir in sorted(p for p in source.iterdir() if p.is_dir()):
        for img in sorted(p for p in gdir.iterdir() if p.is_file() and _is_image(p)):
            model_id = img.stem.split("_", 1)[0]
            yield img, gdir.name, model_id, img.stem


def _scan_flat(source: Path) -> Iterator[Tuple[Path, str, str, str]]:
    """``<garment_id>_<model_id>_<view>.png`` in one directory."""
    for img in sorted(p for p in source.iterdir() if p.is_file() and _is_image(p)):
        parts = img.stem.split("_")
        if len(parts) < 3:
            logger.warning("Skipping %s: flat layout names are <garment>_<model>_<view>", img.name)
            continue
        yield img, parts[0], parts[1], "_".join(parts[1:])


LAYOUTS = {"grouped": _scan_grouped, "flat": _scan_flat}


# -----------------------
# Ingestion
# -----------------------
def _frame_pose(raw: np.ndarray, box: Tuple[int, int, int, int], record_id: str) -> Pose:
    """Labeled joints that leave the crop are clamped to the frame edge, as ``load_pose`` does."""
    kps = crop_resize_keypoints(raw, box)
    labeled = kps[:, 2] > 0
    clamped = kps.copy()
    clamped[:, 0] = np.clip(kps[:, 0], 0.0, FRAME_WIDTH - 1.0)
    clamped[:, 1] = np.clip(kps[:, 1], 0.0, FRAME_HEIGHT - 1.0)
    moved = labeled & np.any(clamped[:, :2] != kps[:, :2], axis=1)
    for i in np.flatnonzero(moved):
        logger.warning(
            "Record %s: %s (%.2f, %.2f) clamped to (%.2f, %.2f)",
            record_id, JOINT_NAMES[i], kps[i, 0], kps[i, 1], clamped[i, 0], clamped[i, 1],
        )
    kps[labeled] = clamped[labeled]
    return Pose.from_array(kps)


def split_groups(group_ids: Sequence[str], cfg: IngestConfig) -> Dict[str, SplitTag]:
    """
    Seeded assignment of whole garment groups to catalog, test and train.

    The catalog draw only depends on the seed, the count and the sorted group ids.
    """
    ids = sorted(group_ids)
    rng = np.random.default_rng(cfg.seed)
    n_catalog = min(cfg.catalog_groups, len(ids))
    catalog = set(rng.choice(ids, size=n_catalog, replace=False).tolist()) if n_catalog else set()
    rest = [g for g in ids if g not in catalog]
    n_test = int(round(cfg.test_fraction * len(rest)))
    test = set(rng.choice(rest, size=n_test, replace=False).tolist()) if n_test else set()
    return {g: ("catalog" if g in catalog else "test" if g in test else "train") for g in ids}


def ingest_dataset(
    source: PathLike,
    out_dir: PathLike,
    cfg: Optional[PipelineConfig] = None,
    layout: Optional[str] = None,
) -> Manifest:
    """
    Crop every image to 4:3, resize to 256x192, and write images, poses, masks
    and ``manifest.json`` under ``out_dir``. Undecodable records are skipped
    with a logged reason.
    """
    cfg = cfg or PipelineConfig()
    layout = layout or cfg.ingest.layout
    if layout not in LAYOUTS:
        raise ManifestError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}", field="ingest.layout")
    source, out = Path(source), Path(out_dir)
    if not source.is_dir():
        raise ManifestError(f"source directory not found: {source}", field="source")

    rows: List[Tuple[str, str, str]] = []
    skipped: List[Dict[str, str]] = []
    for img_path, garment_id, model_id, stem in LAYOUTS[layout](source):
        record_id = f"{garment_id}/{stem}"
        pose_path, mask_path = _sidecars(img_path)
        try:
            with Image.open(img_path) as im:
                frame, box = crop_resize_image(im)
            with Image.open(mask_path) as mk:
                raw_mask = np.asarray(crop_resize_mask(mk if mk.mode in ("L", "P") else mk.convert("L"), box), dtype=np.uint8)
            pose = _frame_pose(parse_keypoint_array(pose_path.read_text(encoding="utf-8")), box, record_id)
        except (OSError, UnidentifiedImageError, PoseParseError, ValueError) as e:
            logger.warning("Skipping %s: %s", img_path, e)
            skipped.append({"path": str(img_path), "reason": str(e)})
            continue

        save_image(np.asarray(frame, dtype=np.float64) / 255.0, out / "images" / f"{record_id}.png")
        save_mask(remap_labels(raw_mask, cfg.seg.labelmap), out / "masks" / f"{record_id}.png")
        pose_file = out / "poses" / f"{record_id}.json"
        pose_file.parent.mkdir(parents=True, exist_ok=True)
        pose_file.write_text(dump_pose(pose), encoding="utf-8")
        rows.append((record_id, garment_id, model_id))

    if not rows:
        raise ManifestError(f"no usable images under {source}", field="source")

    splits = split_groups({g for _, g, _ in rows}, cfg.ingest)
    records = [
        ManifestRecord(
            record_id=rid,
            image_path=f"images/{rid}.png",
            pose_path=f"poses/{rid}.json",
            seg_path=f"masks/{rid}.png",
            garment_id=gid,
            model_id=mid,
            split=splits[gid],
        )
        for rid, gid, mid in sorted(rows)
    ]
    manifest = Manifest(root=str(out.resolve()), layout=layout, seed=cfg.ingest.seed, records=records, skipped=skipped)
    (out / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    groups = manifest.groups()
    logger.info(
        "Ingested %d records in %d garment groups (%d skipped); %d groups eligible for pairing",
        len(records), len(groups), len(skipped), sum(1 for g in groups.values() if len(g) >= 2),
    )
    return manifest


# -----------------------
# Loading
# -----------------------
def load_manifest(path: PathLike) -> Manifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise ManifestError(f"manifest not found: {p}", field="--manifest")
    try:
        manifest = Manifest.model_validate_json(p.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ManifestError(f"invalid manifest {p}: {e}", field="--manifest") from e
    root = Path(manifest.root)
    if not root.is_absolute() or not root.exists():
        # a manifest moved with its directory
        manifest = manifest.model_copy(update={"root": str(p.parent.resolve())})
        root = p.parent
    for r in manifest.records:
        for rel in (r.image_path, r.pose_path, r.seg_path):
            if not (root / rel).exists():
                raise ManifestError(f"record {r.record_id}: missing file {rel}", field="--manifest")
    return manifest


def _load_record(manifest: Manifest, r: ManifestRecord) -> Tuple[np.ndarray, Pose, np.ndarray]:
    root = Path(manifest.root)
    image = load_image(root / r.image_path)
    pose = load_pose((root / r.pose_path).read_text(encoding="utf-8"))
    mask = load_mask(root / r.seg_path)
    return image, pose, mask


def load_catalog(manifest: Manifest, split: Optional[SplitTag] = "catalog") -> List[CatalogEntry]:
    records = manifest.records if split is None else manifest.by_split(split)
    catalog = []
    for r in records:
        image, pose, mask = _load_record(manifest, r)
        catalog.append(CatalogEntry(image=image, pose=pose, seg_mask=mask, garment_id=r.garment_id,
                                    model_id=r.model_id, record_id=r.record_id))
    if not catalog:
        raise ManifestError(f"manifest has no {split or 'any'} records", field="--manifest")
    return catalog


def load_user(manifest: Manifest, record_id: str) -> UserInput:
    for r in manifest.records:
        if r.record_id == record_id:
            image, pose, mask = _load_record(manifest, r)
            return UserInput(image=image, pose=pose, seg_mask=mask, record_id=record_id)
    raise ManifestError(f"record {record_id!r} not in manifest", field="--user-record")


def load_users(manifest: Manifest, split: SplitTag = "test") -> List[UserInput]:
    return [load_user(manifest, r.record_id) for r in manifest.by_split(split)]


def load_user_files(image_path: PathLike, pose_path: PathLike, mask_path: PathLike, labelmap: Optional[Dict[str, int]] = None) -> UserInput:
    return UserInput(
        image=load_image(image_path),
        pose=load_pose(Path(pose_path).read_text(encoding="utf-8")),
        seg_mask=load_mask(mask_path, labelmap),
        record_id=Path(image_path).stem,
    )


def _group_entries(manifest: Manifest, split: Optional[SplitTag]) -> Dict[str, List[CatalogEntry]]:
    groups: Dict[str, List[CatalogEntry]] = {}
    for entry in load_catalog(manifest, split):
        groups.setdefault(entry.garment_id, []).append(entry)
    return groups


def build_pairs(
    manifest: Manifest,
    split: Optional[SplitTag] = "train",
    max_pairs: Optional[int] = None,
    garment_id: Optional[str] = None,
) -> List[TrainingPair]:
    """Ordered (source, target) pairs of distinct records within each garment group."""
    pairs: List[TrainingPair] = []
    for gid, entries in sorted(_group_entries(manifest, split).items()):
        if garment_id is not None and gid != garment_id:
            continue
        for a, b in itertools.permutations(entries, 2):
            pairs.append(TrainingPair(
                source_image=a.image, source_pose=a.pose,
                target_image=b.image, target_pose=b.pose,
                source_identity=gid, target_identity=gid,
            ))
    if max_pairs is not None:
        pairs = pairs[:max_pairs]
    logger.info("Built %d pairs from split %s", len(pairs), split or "all")
    return pairs


def build_texture_triplets(manifest: Manifest, split: Optional[SplitTag] = "train", max_items: Optional[int] = None) -> List[TextureTriplet]:
    """
    Self-supervised triplets: another view's garment region is the donor, the
    target view is both the user (garment region grayed out by the network
    inputs) and the ground truth.
    """
    triplets: List[TextureTriplet] = []
    for _, entries in sorted(_group_entries(manifest, split).items()):
        for a, b in itertools.permutations(entries, 2):
            triplets.append(TextureTriplet(
                posed_model=garment_region(a.image, a.seg_mask),
                user=b.image,
                user_mask=b.seg_mask,
                ground_truth=b.image,
            ))
    return triplets[:max_items] if max_items is not None else triplets
