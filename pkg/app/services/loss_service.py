import logging
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.exceptions import ContractError, TrainingStepError
from app.schemas import LossWeights, WarpLossTerms

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-7

TensorLike = Union[torch.Tensor, float]
FeatureExtractor = Callable[[torch.Tensor], torch.Tensor]


class VGGFeatures(nn.Module):
    """
    Frozen VGG19 (ImageNet weights) up to relu4_1, fed images in [-1, 1].

    Loaded lazily and shared; only built when a perceptual weight is non-zero.
    """

    _instance: Optional["VGGFeatures"] = None
    _lock = threading.Lock()

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[:21]
        for p in features.parameters():
            p.requires_grad_(False)
        self.features = features.eval()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    @classmethod
    def shared(cls) -> "VGGFeatures":
        with cls._lock:
            if cls._instance is None:
                logger.info("Loading VGG19 perceptual feature extractor")
                cls._instance = cls()
            return cls._instance

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = ((x + 1.0) * 0.5 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        self.features.to(x.dtype)
        return self.features(x)


def _as_tensor(x: TensorLike) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.tensor(x, dtype=torch.float64)


def _clamp_prob(p: TensorLike) -> torch.Tensor:
    return _as_tensor(p).clamp(LOSS_EPS, 1.0 - LOSS_EPS)


def _check_same(a: torch.Tensor, b: torch.Tensor, field: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}", field=field)


def gan_loss(d_a_real: TensorLike, d_s_real: TensorLike, d_a_fake: TensorLike, d_s_fake: TensorLike, rho: float) -> torch.Tensor:
    """
    rho-weighted discriminator objective (to be maximized by D):

        E[rho log D_A(real) + (1 - rho) log D_S(real)]
      + E[rho log(1 - D_A(fake)) + (1 - rho) log(1 - D_S(fake))]
    """
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must lie in [0, 1], got {rho}", field="rho")
    a_r, s_r = _clamp_prob(d_a_real), _clamp_prob(d_s_real)
    a_f, s_f = _clamp_prob(d_a_fake), _clamp_prob(d_s_fake)
    real = rho * torch.log(a_r) + (1.0 - rho) * torch.log(s_r)
    fake = rho * torch.log1p(-a_f) + (1.0 - rho) * torch.log1p(-s_f)
    return real.mean() + fake.mean()


def generator_adversarial_loss(d_a_fake: TensorLike, d_s_fake: TensorLike, rho: float) -> torch.Tensor:
    """Non-saturating form: -E[rho log D_A(fake) + (1 - rho) log D_S(fake)]."""
    a_f, s_f = _clamp_prob(d_a_fake), _clamp_prob(d_s_fake)
    return -(rho * torch.log(a_f) + (1.0 - rho) * torch.log(s_f)).mean()


def combined_l1_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    weights: LossWeights,
    feature_extractor: Optional[FeatureExtractor] = None,
) -> torch.Tensor:
    _check_same(generated, target, "target")
    loss = weights.l1_weight * (generated - target).abs().mean()
    if weights.perceptual_weight > 0:
        phi = feature_extractor or VGGFeatures.shared()
        loss = loss + weights.perceptual_weight * (phi(generated) - phi(target)).abs().mean()
    return loss


@dataclass
class BatchOutputs:
    """Discriminator probabilities and images of one training batch."""
    generated: torch.Tensor
    target: torch.Tensor
    d_a_real: torch.Tensor
    d_s_real: torch.Tensor
    d_a_fake: torch.Tensor
    d_s_fake: torch.Tensor


def total_objective(
    outputs: BatchOutputs,
    weights: LossWeights,
    feature_extractor: Optional[FeatureExtractor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    g_adv = generator_adversarial_loss(outputs.d_a_fake, outputs.d_s_fake, weights.rho)
    g_loss = weights.alpha * g_adv + combined_l1_loss(outputs.generated, outputs.target, weights, feature_extractor)
    d_loss = -gan_loss(outputs.d_a_real, outputs.d_s_real, outputs.d_a_fake, outputs.d_s_fake, weights.rho)
    for name, value in (("generator_loss", g_loss), ("discriminator_loss", d_loss)):
        if not torch.isfinite(value).all():
            raise TrainingStepError(f"non-finite {name}: {value.detach().cpu().tolist()}", field=name)
    return g_loss, d_loss


def perceptual_geometric_matching(
    gt: torch.Tensor,
    coarse: torch.Tensor,
    refined: torch.Tensor,
    feature_extractor: Optional[FeatureExtractor] = None,
) -> torch.Tensor:
    """
    Feature-space L1 of both warp stages against the ground truth plus a hinge
    that penalizes the refined stage when it lands further from the ground truth
    than the coarse stage.
    """
    phi = feature_extractor or VGGFeatures.shared()
    f_gt, f_0, f_1 = phi(gt), phi(coarse), phi(refined)
    d0 = (f_0 - f_gt).abs().mean()
    d1 = (f_1 - f_gt).abs().mean()
    return d0 + d1 + F.relu(d1 - d0)


def warp_loss(terms: WarpLossTerms, feature_extractor: Optional[FeatureExtractor] = None) -> torch.Tensor:
    gt, s0, s1 = _as_tensor(terms.I_gt), _as_tensor(terms.I_stn_0), _as_tensor(terms.I_stn_1)
    _check_same(gt, s0, "I_stn_0")
    _check_same(gt, s1, "I_stn_1")
    l1, l2, l3 = terms.lambdas
    if min(l1, l2, l3) < 0:
        raise ContractError("warp loss lambdas must be non-negative", field="lambdas")
    loss = l1 * (gt - s0).abs().mean() + l2 * (gt - s1).abs().mean()
    if l3 > 0:
        loss = loss + l3 * perceptual_geometric_matching(gt, s0, s1, feature_extractor)
    return loss
