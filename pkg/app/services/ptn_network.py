import logging
from typing import Any, Dict, List, Literal, Tuple

import numpy as np
import torch
import torch.nn as nn

from app.core.configs import NUM_JOINTS, NetworkConfig
from app.core.exceptions import ContractError
from app.helpers.preprocessor import heatmaps_to_tensor, image_to_tensor, tensor_to_image
from app.schemas import HeatmapStack

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, padding_mode="reflect"),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, padding_mode="reflect"),
        nn.InstanceNorm2d(out_ch, affine=True),
    )


def _down(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


def _up(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


def _stem(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 7, padding=3, padding_mode="reflect"),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


class PoseAttentionBlock(nn.Module):
    """
    One pose-attentional transfer block.

    The pose pathway sees both streams; its output is projected to an attention
    mask M in (0, 1) that gates a residual update of the image pathway.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.image_block = _conv_block(dim, dim)
        self.pose_block = _conv_block(2 * dim, dim)
        self.attention = nn.Conv2d(dim, dim, 1)

    def attention_mask(self, pose_out: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.attention(pose_out))

    def forward(self, image_features: torch.Tensor, pose_features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if image_features.shape != pose_features.shape:
            raise ContractError(
                f"feature maps misaligned: image {tuple(image_features.shape)} vs pose {tuple(pose_features.shape)}",
                field="pose_features",
            )
        pose_out = self.pose_block(torch.cat([pose_features, image_features], dim=1))
        mask = self.attention_mask(pose_out)
        image_out = image_features + mask * self.image_block(image_features)
        return image_out, pose_out


def attention_block_forward(block: PoseAttentionBlock, image_features: torch.Tensor, pose_features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return block(image_features, pose_features)


class PoseTransferGenerator(nn.Module):
    """Encoder (two downsamplings) -> n pose-attention blocks -> decoder (two upsamplings)."""

    def __init__(self, base_channels: int = 64, n_blocks: int = 9, pose_channels: int = NUM_JOINTS):
        super().__init__()
        self.base_channels = base_channels
        self.n_blocks = n_blocks
        self.pose_channels = pose_channels
        c = base_channels
        self.image_encoder = nn.Sequential(_stem(3, c), _down(c, 2 * c), _down(2 * c, 4 * c))
        self.pose_encoder = nn.Sequential(_stem(2 * pose_channels, c), _down(c, 2 * c), _down(2 * c, 4 * c))
        self.blocks = nn.ModuleList([PoseAttentionBlock(4 * c) for _ in range(n_blocks)])
        self.decoder = nn.Sequential(
            _up(4 * c, 2 * c),
            _up(2 * c, c),
            nn.Conv2d(c, 3, 7, padding=3, padding_mode="reflect"),
            nn.Tanh(),
        )

    def architecture(self) -> Dict[str, Any]:
        return {"base_channels": self.base_channels, "n_blocks": self.n_blocks, "pose_channels": self.pose_channels}

    def forward(self, source_image: torch.Tensor, source_pose: torch.Tensor, target_pose: torch.Tensor) -> torch.Tensor:
        """Inputs: image (N, 3, H, W) in [-1, 1], heatmaps (N, 18, H, W). Output in [-1, 1]."""
        if source_pose.shape != target_pose.shape:
            raise ContractError("source and target heatmaps differ in shape", field="target_pose")
        if source_image.shape[-2:] != source_pose.shape[-2:]:
            raise ContractError(
                f"image {tuple(source_image.shape[-2:])} and heatmaps {tuple(source_pose.shape[-2:])} are not in the same frame",
                field="source_pose",
            )
        if source_pose.shape[1] != self.pose_channels or source_image.shape[1] != 3:
            raise ContractError("unexpected channel count for generator inputs", field="source_image")
        f = self.image_encoder(source_image)
        p = self.pose_encoder(torch.cat([source_pose, target_pose], dim=1))
        for block in self.blocks:
            f, p = block(f, p)
        return self.decoder(f)


class _ProbabilityNet(nn.Module):
    def __init__(self, in_ch: int, channels: int, n_layers: int):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv2d(in_ch, channels, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = channels
        for _ in range(1, n_layers):
            nxt = min(ch * 2, channels * 8)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = nxt
        # final stage is unnormalized
        layers += [nn.Conv2d(ch, 1, 3, padding=1)]
        self.features = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.features(x).mean(dim=(1, 2, 3))
        return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


class DualDiscriminator(nn.Module):
    """Appearance discriminator D_A(source image, candidate) and shape discriminator D_S(target heatmaps, candidate)."""

    def __init__(self, channels: int = 64, n_layers: int = 3, pose_channels: int = NUM_JOINTS):
        super().__init__()
        self.channels = channels
        self.n_layers = n_layers
        self.pose_channels = pose_channels
        self.appearance = _ProbabilityNet(3 + 3, channels, n_layers)
        self.shape = _ProbabilityNet(pose_channels + 3, channels, n_layers)

    def architecture(self) -> Dict[str, Any]:
        return {"disc_channels": self.channels, "disc_layers": self.n_layers}

    def forward(self, which: Literal["appearance", "shape"], conditioning: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if conditioning.shape[-2:] != candidate.shape[-2:]:
            raise ContractError("conditioning and candidate are not in the same frame", field="conditioning")
        if which == "appearance":
            if conditioning.shape[1] != 3:
                raise ContractError("appearance discriminator expects an image as conditioning", field="conditioning")
            return self.appearance(torch.cat([conditioning, candidate], dim=1))
        if which == "shape":
            if conditioning.shape[1] != self.pose_channels:
                raise ContractError("shape discriminator expects a heatmap stack as conditioning", field="conditioning")
            return self.shape(torch.cat([conditioning, candidate], dim=1))
        raise ContractError(f"unknown discriminator {which!r}", field="which")


def discriminator_forward(d: DualDiscriminator, which: Literal["appearance", "shape"], conditioning: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
    return d(which, conditioning, candidate)


class TextureTranslationNet(nn.Module):
    """
    Two-stage encoder-decoder for the learned texture path.

    Input: posed-model garment region, user image and a user body-region mask.
    The coarse stage predicts the try-on image; the refinement stage corrects it
    given the coarse output and the same conditioning.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        self.channels = channels
        c = channels
        in_ch = 3 + 3 + 1
        self.coarse = nn.Sequential(
            _stem(in_ch, c), _down(c, 2 * c), _conv_block(2 * c, 2 * c), nn.ReLU(inplace=True),
            _up(2 * c, c), nn.Conv2d(c, 3, 7, padding=3, padding_mode="reflect"), nn.Tanh(),
        )
        self.refine = nn.Sequential(
            _stem(in_ch + 3, c), _down(c, 2 * c), _conv_block(2 * c, 2 * c), nn.ReLU(inplace=True),
            _up(2 * c, c), nn.Conv2d(c, 3, 7, padding=3, padding_mode="reflect"),
        )

    def architecture(self) -> Dict[str, Any]:
        return {"texture_channels": self.channels}

    def forward_stages(self, garment: torch.Tensor, user: torch.Tensor, body_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if garment.shape != user.shape or body_mask.shape[-2:] != user.shape[-2:] or body_mask.shape[1] != 1:
            raise ContractError("texture translation inputs are not shape-consistent", field="user_mask")
        x = torch.cat([garment, user, body_mask], dim=1)
        coarse = self.coarse(x)
        refined = torch.tanh(coarse + self.refine(torch.cat([x, coarse], dim=1)))
        return coarse, refined

    def forward(self, garment: torch.Tensor, user: torch.Tensor, body_mask: torch.Tensor) -> torch.Tensor:
        return self.forward_stages(garment, user, body_mask)[1]


def build_generator(cfg: NetworkConfig) -> PoseTransferGenerator:
    return PoseTransferGenerator(base_channels=cfg.base_channels, n_blocks=cfg.n_blocks)


def build_discriminator(cfg: NetworkConfig) -> DualDiscriminator:
    return DualDiscriminator(channels=cfg.disc_channels, n_layers=cfg.disc_layers)


def build_texture_net(cfg: NetworkConfig) -> TextureTranslationNet:
    return TextureTranslationNet(channels=cfg.texture_channels)


def count_parameters(*modules: nn.Module) -> int:
    return int(sum(p.numel() for m in modules for p in m.parameters()))


def to_unit_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def to_signed_range(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


@torch.no_grad()
def generator_forward(g: PoseTransferGenerator, source_image: np.ndarray, source_pose: HeatmapStack, target_pose: HeatmapStack) -> np.ndarray:
    """
    ImageRGB + two HeatmapStacks -> ImageRGB in [0, 1].

    Runs in eval mode; deterministic for fixed parameters and inputs.
    """
    param = next(g.parameters())
    img_t = image_to_tensor(source_image, param.dtype).to(param.device)
    src_t = heatmaps_to_tensor(source_pose.channels, param.dtype).to(param.device)
    tgt_t = heatmaps_to_tensor(target_pose.channels, param.dtype).to(param.device)
    was_training = g.training
    g.eval()
    try:
        out = g(img_t, src_t, tgt_t)
    finally:
        g.train(was_training)
    return tensor_to_image(out)
