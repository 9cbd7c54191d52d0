import hashlib
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.core.configs import PipelineConfig
from app.core.exceptions import CheckpointError, NoGarmentRegionError, SingularSystemError, StageError, TryOnError
from app.helpers.preprocessor import save_image, save_mask
from app.schemas import (
    CatalogEntry,
    Pose,
    RankedCandidate,
    SegLabel,
    SelectedCandidate,
    TPSDiagnostics,
    TransferMethod,
    TransferMethodKind,
    TransferResult,
    UserInput,
)
from app.schemas.texture_schemas import GARMENT_LABELS
from app.services.checkpoint_service import load_blob, restore_module
from app.services.dataset_service import load_catalog, load_manifest
from app.services.pose_service import PoseMatcher, encode_heatmaps
from app.services.ptn_network import PoseTransferGenerator, TextureTranslationNet, generator_forward
from app.services.texture_service import (
    apply_sleeve_rule,
    body_region,
    choose_method,
    copy_paste_transfer,
    donor_region,
    garment_region,
    label_region,
    texture_translation_forward,
)
from app.services.warp_service import (
    apply_tps,
    apply_tps_labels,
    bending_energy,
    fit_tps,
    frame_anchor_points,
    gaussian_feather_composite,
    tps_map_points,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_generator(path: PathLike, device: str = "cpu") -> PoseTransferGenerator:
    """Builds the generator from the architecture recorded in the checkpoint."""
    blob, meta = load_blob(path, device)
    arch = meta.architecture
    try:
        g = PoseTransferGenerator(base_channels=arch["base_channels"], n_blocks=arch["n_blocks"], pose_channels=arch["pose_channels"])
    except KeyError as e:
        raise CheckpointError(f"checkpoint {path} has no generator architecture ({e})", field="--checkpoint")
    if "generator" not in blob["modules"]:
        raise CheckpointError(f"checkpoint {path} holds no generator", field="--checkpoint")
    restore_module(g, blob["modules"]["generator"], "generator")
    return g.to(torch.device(device)).eval()


def load_texture_net(path: PathLike, device: str = "cpu") -> TextureTranslationNet:
    blob, meta = load_blob(path, device)
    if "texture_net" not in blob["modules"] or "texture_channels" not in meta.architecture:
        raise CheckpointError(f"checkpoint {path} holds no texture network", field="--texture-checkpoint")
    net = TextureTranslationNet(channels=meta.architecture["texture_channels"])
    restore_module(net, blob["modules"]["texture_net"], "texture_net")
    return net.to(torch.device(device)).eval()


def inputs_digest(user: UserInput, garment_id: str, config_digest: str) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(user.image).tobytes())
    h.update(user.pose.to_array().tobytes())
    h.update(np.ascontiguousarray(user.seg_mask).tobytes())
    h.update(f"{garment_id}|{config_digest}".encode("utf-8"))
    return h.hexdigest()[:16]


# -----------------------
# TPS refinement
# -----------------------
def refine_with_tps(
    generated: np.ndarray,
    entry: CatalogEntry,
    user_pose: Pose,
    cfg: PipelineConfig,
) -> Tuple[np.ndarray, np.ndarray, TPSDiagnostics]:
    """
    Fit a TPS from the catalog joints onto the user's joints (plus the frame
    corners when anchored), warp the catalog mask into the user's pose and,
    when enabled, paste the warped catalog garment over the generated one.

    Returns (refined image, posed model mask, diagnostics). A degenerate
    control set skips the warp and keeps the catalog mask.
    """
    both = (entry.pose.visibility() > 0) & (user_pose.visibility() > 0)
    src, dst = entry.pose.xy()[both], user_pose.xy()[both]
    if cfg.warp.anchor_corners:
        corners = frame_anchor_points(*generated.shape[:2])
        src, dst = np.vstack([src, corners]), np.vstack([dst, corners])

    def skipped(reason: str) -> Tuple[np.ndarray, np.ndarray, TPSDiagnostics]:
        logger.warning("TPS refinement skipped: %s", reason)
        diag = TPSDiagnostics(n_control_points=int(src.shape[0]), regularization=cfg.warp.regularization, skipped_reason=reason)
        return generated, entry.seg_mask.copy(), diag

    if src.shape[0] < 3:
        return skipped(f"only {src.shape[0]} matched control points")
    try:
        t = fit_tps(src, dst, cfg.warp.regularization)
        mask = apply_tps_labels(t, entry.seg_mask, fill=int(SegLabel.BACKGROUND))
        refined = generated
        if cfg.warp.refine_texture:
            warped = apply_tps(t, entry.image, fill=cfg.warp.fill)
            garment = label_region(mask, GARMENT_LABELS)
            refined = np.where(garment[..., None], warped, generated)
    except SingularSystemError as e:
        return skipped(e.message)

    diag = TPSDiagnostics(
        n_control_points=t.n_points,
        regularization=t.regularization,
        bending_energy=bending_energy(t),
        max_control_residual=float(np.max(np.abs(tps_map_points(t, src) - dst))),
    )
    return refined, mask, diag


# -----------------------
# Texture transfer
# -----------------------
def texture_transfer(
    user: UserInput,
    posed_model: np.ndarray,
    model_mask: np.ndarray,
    method: TransferMethod,
    cfg: PipelineConfig,
    texture_net: Optional[TextureTranslationNet] = None,
) -> Tuple[np.ndarray, int, List[str]]:
    """
    Apply the sleeve rule, then the chosen texture method.

    Returns (final image, sleeve pixel count, warnings). Without a texture
    network the texture-translation choice falls back to copy-paste.
    """
    radius = cfg.composite.radius
    warnings: List[str] = []
    base, sleeves, sleeve_warnings = apply_sleeve_rule(user.image, posed_model, user.seg_mask, model_mask, radius, cfg.texture)
    warnings.extend(sleeve_warnings)

    if method.kind == TransferMethodKind.TEXTURE_TRANSLATION:
        if texture_net is None:
            warnings.append("no texture checkpoint loaded; texture translation fell back to copy-paste")
        else:
            out = texture_translation_forward(texture_net, garment_region(posed_model, model_mask), base, user.seg_mask)
            region = body_region(user.seg_mask) | donor_region(user.seg_mask, model_mask)
            return gaussian_feather_composite(base, out, region, radius), int(sleeves.sum()), warnings

    if not donor_region(user.seg_mask, model_mask).any():
        warnings.append("empty garment region; user image returned unchanged")
    final = copy_paste_transfer(base, posed_model, user.seg_mask, model_mask, radius)
    return final, int(sleeves.sum()), warnings


class TryOnPipeline:
    """
    Catalog selection, pose transfer, TPS refinement and texture transfer over
    a loaded catalog and read-only networks.

    ``run_transfer`` does not mutate the pipeline, so independent requests may
    run concurrently.
    """

    def __init__(
        self,
        catalog: Sequence[CatalogEntry],
        generator: PoseTransferGenerator,
        config: Optional[PipelineConfig] = None,
        texture_net: Optional[TextureTranslationNet] = None,
    ):
        self.config = config or PipelineConfig()
        self.catalog = tuple(catalog)
        self.matcher = PoseMatcher(self.catalog, self.config.oks)
        self.generator = generator.eval()
        self.texture_net = texture_net.eval() if texture_net is not None else None
        self.config_digest = self.config.digest()

    @classmethod
    def from_paths(
        cls,
        manifest: PathLike,
        checkpoint: PathLike,
        config: Optional[PipelineConfig] = None,
        texture_checkpoint: Optional[PathLike] = None,
        device: str = "cpu",
    ) -> "TryOnPipeline":
        config = config or PipelineConfig()
        catalog = load_catalog(load_manifest(manifest))
        generator = load_generator(checkpoint, device)
        texture_net = load_texture_net(texture_checkpoint, device) if texture_checkpoint else None
        logger.info("Pipeline ready: %d catalog entries, %d garments", len(catalog), len(cls.garments_of(catalog)))
        return cls(catalog, generator, config, texture_net)

    @staticmethod
    def garments_of(catalog: Sequence[CatalogEntry]) -> List[str]:
        return sorted({e.garment_id for e in catalog})

    @property
    def garment_ids(self) -> List[str]:
        return self.garments_of(self.catalog)

    def match(self, pose: Pose, garment_id: Optional[str] = None, top_k: Optional[int] = None) -> List[RankedCandidate]:
        return self.matcher.rank(pose, garment_id=garment_id, top_k=top_k)

    @contextmanager
    def _stage(self, name: str, timings: Dict[str, float], digest: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            yield
        except TryOnError as e:
            e.stage = e.stage or name
            e.details.setdefault("inputs_digest", digest)
            raise
        except Exception as e:
            logger.exception("Stage %s failed (inputs %s)", name, digest)
            raise StageError(f"stage {name} failed: {e}", stage=name, inputs_digest=digest) from e
        finally:
            timings[name] = time.perf_counter() - started

    def run_transfer(self, user: UserInput, garment_id: str) -> TransferResult:
        cfg = self.config
        timings: Dict[str, float] = {}
        warnings: List[str] = []
        digest = inputs_digest(user, garment_id, self.config_digest)

        with self._stage("select", timings, digest):
            index, entry, score = self.matcher.select(user.pose, garment_id)
            if score < cfg.oks.floor:
                warnings.append(f"pose mismatch: best OKS {score:.4f} is below floor {cfg.oks.floor}")
                logger.warning("Pose mismatch for garment %s: OKS %.4f < %.4f", garment_id, score, cfg.oks.floor)

        with self._stage("pose_transfer", timings, digest):
            sigma = cfg.heatmap.sigma_px
            posed = generator_forward(self.generator, entry.image, encode_heatmaps(entry.pose, sigma), encode_heatmaps(user.pose, sigma))

        with self._stage("tps_refine", timings, digest):
            refined, model_mask, tps_diag = refine_with_tps(posed, entry, user.pose, cfg)
            if tps_diag.skipped_reason:
                warnings.append(f"tps refinement skipped: {tps_diag.skipped_reason}")

        with self._stage("choose_method", timings, digest):
            try:
                method = choose_method(user.seg_mask, model_mask, cfg.texture)
            except NoGarmentRegionError:
                method = TransferMethod(
                    kind=TransferMethodKind.COPY_PASTE, score=0.0,
                    threshold=cfg.texture.occlusion_threshold, garment_pixels=0, occluded_pixels=0,
                )

        with self._stage("texture_transfer", timings, digest):
            final, sleeve_pixels, stage_warnings = texture_transfer(user, refined, model_mask, method, cfg, self.texture_net)
            warnings.extend(stage_warnings)

        return TransferResult(
            final_image=final,
            selected=SelectedCandidate(index=index, record_id=entry.record_id, garment_id=entry.garment_id,
                                       model_id=entry.model_id, score=score),
            posed_model=posed,
            refined_model=refined,
            posed_model_mask=model_mask,
            tps=tps_diag,
            method=method,
            sleeve_pixels=sleeve_pixels,
            stage_seconds=timings,
            warnings=warnings,
            config_digest=self.config_digest,
        )


def run_transfer(
    user: UserInput,
    garment_id: str,
    catalog: Sequence[CatalogEntry],
    generator: PoseTransferGenerator,
    config: Optional[PipelineConfig] = None,
    texture_net: Optional[TextureTranslationNet] = None,
) -> TransferResult:
    return TryOnPipeline(catalog, generator, config, texture_net).run_transfer(user, garment_id)


def write_result(result: TransferResult, out_dir: PathLike) -> Path:
    """Final image plus every intermediate and a JSON record of the run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.final_image, out / "final.png")
    save_image(result.posed_model, out / "posed_model.png")
    save_image(result.refined_model, out / "refined_model.png")
    save_mask(result.posed_model_mask, out / "posed_model_mask.png")
    record = result.model_dump(mode="json", exclude={"final_image", "posed_model", "refined_model", "posed_model_mask"})
    (out / "result.json").write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    return out
