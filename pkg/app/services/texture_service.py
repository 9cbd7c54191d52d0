import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.configs import TextureConfig
from app.core.exceptions import ContractError, NoGarmentRegionError, NoSkinReferenceError
from app.helpers.preprocessor import image_to_tensor, mask_to_tensor, tensor_to_image
from app.schemas import SegLabel, TransferMethod, TransferMethodKind
from app.schemas.texture_schemas import ARM_LABELS, GARMENT_LABELS, OCCLUDER_LABELS, PROTECTED_LABELS, SKIN_LABELS
from app.services.ptn_network import TextureTranslationNet
from app.services.warp_service import gaussian_feather_composite

logger = logging.getLogger(__name__)

# ITU-R BT.601 full-range RGB -> YCbCr (offsets cancel in a mean shift)
_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)


def label_region(mask: np.ndarray, labels: Sequence[SegLabel]) -> np.ndarray:
    return np.isin(np.asarray(mask), [int(lab) for lab in labels])


def _check_masks(*masks: np.ndarray) -> None:
    shapes = {np.asarray(m).shape for m in masks}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ContractError(f"segmentation masks must be 2-D and equally sized, got {sorted(shapes)}", field="mask")


# -----------------------
# Method selection
# -----------------------
def occlusion_ratio(user_mask: np.ndarray, model_mask: np.ndarray) -> Tuple[float, int, int]:
    """
    Share of the model's garment region covered by the user's hair or accessories.

    Returns (ratio, garment_pixels, occluded_pixels).
    """
    _check_masks(user_mask, model_mask)
    garment = label_region(model_mask, GARMENT_LABELS)
    n_garment = int(np.count_nonzero(garment))
    if n_garment == 0:
        raise NoGarmentRegionError("no garment region in model mask", field="model_mask")
    occluded = int(np.count_nonzero(garment & label_region(user_mask, OCCLUDER_LABELS)))
    return occluded / n_garment, n_garment, occluded


def choose_method(user_mask: np.ndarray, model_mask: np.ndarray, cfg: Optional[TextureConfig] = None) -> TransferMethod:
    cfg = cfg or TextureConfig()
    ratio, n_garment, n_occluded = occlusion_ratio(user_mask, model_mask)
    kind = TransferMethodKind.COPY_PASTE if ratio <= cfg.occlusion_threshold else TransferMethodKind.TEXTURE_TRANSLATION
    logger.debug("Occlusion ratio %.4f (threshold %.4f) -> %s", ratio, cfg.occlusion_threshold, kind.value)
    return TransferMethod(
        kind=kind,
        score=ratio,
        threshold=cfg.occlusion_threshold,
        garment_pixels=n_garment,
        occluded_pixels=n_occluded,
    )


# -----------------------
# Copy-paste path
# -----------------------
def donor_region(user_mask: np.ndarray, model_mask: np.ndarray) -> np.ndarray:
    """Model garment labels, minus the user's hair, face and accessories."""
    _check_masks(user_mask, model_mask)
    return label_region(model_mask, GARMENT_LABELS) & ~label_region(user_mask, PROTECTED_LABELS)


def copy_paste_transfer(
    user: np.ndarray,
    posed_model: np.ndarray,
    user_mask: np.ndarray,
    model_mask: np.ndarray,
    radius: int,
    strict: bool = False,
) -> np.ndarray:
    """
    Feathered paste of the posed model's garment onto the user.

    Pixels farther than ``radius`` from the donor region are the user's pixels, bit for bit.
    With an empty donor region the user image is returned unchanged, or
    NoGarmentRegionError is raised when ``strict``.
    """
    user = np.asarray(user)
    if user.shape != np.asarray(posed_model).shape:
        raise ContractError(f"user {user.shape} and posed model {np.asarray(posed_model).shape} differ", field="posed_model")
    donor = donor_region(user_mask, model_mask)
    if donor.shape != user.shape[:2]:
        raise ContractError("masks are not in the image frame", field="user_mask")
    if not donor.any():
        if strict:
            raise NoGarmentRegionError("no garment region to transfer", field="model_mask")
        logger.warning("Empty donor region; returning the user image unchanged")
        return user.copy()
    return gaussian_feather_composite(user, posed_model, donor, radius)


# -----------------------
# Texture-translation path
# -----------------------
def garment_region(posed_model: np.ndarray, model_mask: np.ndarray) -> np.ndarray:
    """Posed model with everything but the garment set to mid-gray."""
    keep = label_region(model_mask, GARMENT_LABELS)[..., None]
    return np.where(keep, posed_model, 0.5)


def body_region(user_mask: np.ndarray) -> np.ndarray:
    return label_region(user_mask, GARMENT_LABELS + ARM_LABELS)


def agnostic_user(user: np.ndarray, user_mask: np.ndarray) -> np.ndarray:
    """User with the garment and arm region grayed out, keeping identity regions."""
    return np.where(body_region(user_mask)[..., None], 0.5, user)


def texture_inputs(
    posed_model: np.ndarray,
    user: np.ndarray,
    user_mask: np.ndarray,
    dtype: torch.dtype = torch.float32,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    posed_model, user = np.asarray(posed_model), np.asarray(user)
    if posed_model.shape != user.shape or np.asarray(user_mask).shape != user.shape[:2]:
        raise ContractError(
            f"texture inputs differ in shape: model {posed_model.shape}, user {user.shape}, mask {np.asarray(user_mask).shape}",
            field="user_mask",
        )
    return (
        image_to_tensor(posed_model, dtype),
        image_to_tensor(agnostic_user(user, user_mask), dtype),
        mask_to_tensor(body_region(user_mask), dtype),
    )


@torch.no_grad()
def texture_translation_forward(
    net: TextureTranslationNet,
    posed_model: np.ndarray,
    user: np.ndarray,
    user_mask: np.ndarray,
) -> np.ndarray:
    """``posed_model`` is expected to hold only the garment region (see ``garment_region``)."""
    param = next(net.parameters())
    garment_t, user_t, mask_t = (t.to(param.device) for t in texture_inputs(posed_model, user, user_mask, param.dtype))
    was_training = net.training
    net.eval()
    try:
        out = net(garment_t, user_t, mask_t)
    finally:
        net.train(was_training)
    return tensor_to_image(out)


# -----------------------
# Skin tone and sleeves
# -----------------------
def _to_ycc(rgb: np.ndarray) -> np.ndarray:
    return rgb @ _RGB_TO_YCC.T


def _to_rgb(ycc: np.ndarray) -> np.ndarray:
    return ycc @ _YCC_TO_RGB.T


def skin_tone_adjust(donor_pixels: np.ndarray, user_skin_pixels: np.ndarray, strict: bool = False) -> np.ndarray:
    """
    Shift the donor region in YCbCr so its channel means match the user skin sample.

    Works on any (..., 3) array of pixels in [0, 1]; the result is clamped to [0, 1].
    """
    donor = np.asarray(donor_pixels, dtype=np.float64)
    skin = np.asarray(user_skin_pixels, dtype=np.float64).reshape(-1, 3)
    if skin.shape[0] == 0:
        if strict:
            raise NoSkinReferenceError("no skin reference pixels in user mask", field="user_mask")
        logger.warning("No skin reference available; arm region left untuned")
        return donor.copy()
    if donor.size == 0:
        return donor.copy()
    flat = donor.reshape(-1, 3)
    ycc = _to_ycc(flat)
    shifted = ycc + (_to_ycc(skin).mean(axis=0) - ycc.mean(axis=0))
    return np.clip(_to_rgb(shifted), 0.0, 1.0).reshape(donor.shape)


def sleeve_region(user_mask: np.ndarray, model_mask: np.ndarray) -> np.ndarray:
    """Exposed model arms over pixels where the user wears upper clothes (long sleeves onto short sleeves)."""
    _check_masks(user_mask, model_mask)
    return label_region(model_mask, ARM_LABELS) & label_region(user_mask, GARMENT_LABELS)


def apply_sleeve_rule(
    user: np.ndarray,
    posed_model: np.ndarray,
    user_mask: np.ndarray,
    model_mask: np.ndarray,
    radius: int,
    cfg: Optional[TextureConfig] = None,
) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """
    Paint the model's exposed arms, tuned to the user's skin color, where the
    user's sleeves would otherwise show. Returns (image, sleeve mask, warnings);
    the mask is empty when the rule does not trigger.
    """
    cfg = cfg or TextureConfig()
    user = np.asarray(user)
    sleeves = sleeve_region(user_mask, model_mask)
    if int(np.count_nonzero(sleeves)) < cfg.sleeve_min_pixels:
        return user, np.zeros_like(sleeves), []

    warnings: List[str] = []
    skin = user[label_region(user_mask, SKIN_LABELS)]
    if skin.shape[0] == 0:
        warnings.append("no skin reference in user mask; exposed arms copied untuned")
    canvas = user.copy()
    canvas[sleeves] = skin_tone_adjust(np.asarray(posed_model)[sleeves], skin)
    logger.info("Sleeve rule triggered on %d pixels", int(np.count_nonzero(sleeves)))
    return gaussian_feather_composite(user, canvas, sleeves, radius), sleeves, warnings
