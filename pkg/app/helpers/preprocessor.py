import logging
import os
import random
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH
from app.core.exceptions import ContractError
from app.schemas.texture_schemas import SegLabel

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a dedicated torch generator for data order."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


# -----------------------
# Geometry of the 256x192 frame
# -----------------------
def center_crop_box(width: int, height: int, aspect: float = FRAME_HEIGHT / FRAME_WIDTH) -> Tuple[int, int, int, int]:
    """Largest centered box with height / width == aspect (4:3 portrait)."""
    if height / width > aspect:
        new_h = int(round(width * aspect))
        top = (height - new_h) // 2
        return 0, top, width, top + new_h
    new_w = int(round(height / aspect))
    left = (width - new_w) // 2
    return left, 0, left + new_w, height


def crop_resize_image(img: Image.Image) -> Tuple[Image.Image, Tuple[int, int, int, int]]:
    box = center_crop_box(*img.size)
    out = img.convert("RGB").crop(box).resize((FRAME_WIDTH, FRAME_HEIGHT), Image.BICUBIC)
    return out, box


def crop_resize_mask(mask: Image.Image, box: Tuple[int, int, int, int]) -> Image.Image:
    return mask.crop(box).resize((FRAME_WIDTH, FRAME_HEIGHT), Image.NEAREST)


def crop_resize_keypoints(kps: np.ndarray, box: Tuple[int, int, int, int]) -> np.ndarray:
    """Map (18, 3) keypoints through the crop box and resize into the frame."""
    left, top, right, bottom = box
    sx = FRAME_WIDTH / float(right - left)
    sy = FRAME_HEIGHT / float(bottom - top)
    out = np.asarray(kps, dtype=np.float64).copy()
    out[:, 0] = (out[:, 0] - left) * sx
    out[:, 1] = (out[:, 1] - top) * sy
    return out


# -----------------------
# Raster I/O
# -----------------------
def load_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape != (FRAME_HEIGHT, FRAME_WIDTH, 3):
        raise ContractError(f"image {path} is {arr.shape[:2]}, expected {FRAME_HEIGHT}x{FRAME_WIDTH}", field="image")
    return arr


def save_image(arr: np.ndarray, path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def load_mask(path: PathLike, labelmap: Optional[Dict[str, int]] = None) -> np.ndarray:
    """Read an indexed mask and translate file ids to canonical SegLabel ids."""
    with Image.open(path) as im:
        raw = np.asarray(im if im.mode in ("L", "P") else im.convert("L"), dtype=np.uint8)
    if raw.shape != (FRAME_HEIGHT, FRAME_WIDTH):
        raise ContractError(f"mask {path} is {raw.shape}, expected {FRAME_HEIGHT}x{FRAME_WIDTH}", field="mask")
    return remap_labels(raw, labelmap)


def save_mask(mask: np.ndarray, path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path, format="PNG")


def remap_labels(raw: np.ndarray, labelmap: Optional[Dict[str, int]] = None) -> np.ndarray:
    """labelmap: canonical label name -> id used in the files. Ids not listed become OTHER."""
    if not labelmap:
        out = raw.astype(np.uint8).copy()
        out[out > max(SegLabel)] = SegLabel.OTHER
        return out
    lut = np.full(256, SegLabel.OTHER, dtype=np.uint8)
    for name, file_id in labelmap.items():
        try:
            label = SegLabel[name.upper()]
        except KeyError:
            raise ContractError(f"unknown label name {name!r} in seg.labelmap", field="seg.labelmap")
        lut[int(file_id)] = label
    return lut[raw]


# -----------------------
# numpy <-> torch
# -----------------------
def image_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) in [0, 1] -> (1, 3, H, W) in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).to(dtype)
    return (t * 2.0 - 1.0).unsqueeze(0)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) in [-1, 1] -> (H, W, 3) float64 in [0, 1]."""
    if t.dim() == 4:
        t = t[0]
    arr = ((t.detach().to(torch.float64).cpu() + 1.0) * 0.5).clamp(0.0, 1.0)
    return arr.permute(1, 2, 0).numpy()


def heatmaps_to_tensor(channels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(channels)).to(dtype).unsqueeze(0)


def mask_to_tensor(mask: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy((np.asarray(mask) > 0).astype(np.float32)).to(dtype)[None, None]
