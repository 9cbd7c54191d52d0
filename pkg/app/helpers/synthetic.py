import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH
from app.schemas.texture_schemas import SegLabel

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
Point = Tuple[float, float]

# Front-facing figure in the 256x192 frame, 18-joint order.
TEMPLATE_POSE = np.array([
    [96, 40], [96, 62],
    [74, 64], [66, 100], [62, 134],
    [118, 64], [126, 100], [130, 134],
    [84, 136], [82, 186], [80, 232],
    [108, 136], [110, 186], [112, 232],
    [91, 35], [101, 35], [86, 38], [106, 38],
], dtype=np.float64)

SKIN_TONES = [(0.96, 0.80, 0.69), (0.87, 0.67, 0.52), (0.68, 0.47, 0.33), (0.45, 0.30, 0.21)]
HAIR_COLORS = [(0.10, 0.07, 0.05), (0.35, 0.20, 0.10), (0.80, 0.65, 0.35), (0.55, 0.10, 0.05)]
SLEEVES = ("none", "short", "long")


@dataclass(frozen=True)
class GarmentStyle:
    base: Tuple[int, int, int]
    stripe: Tuple[int, int, int]
    period: int
    sleeves: str


@dataclass(frozen=True)
class ModelStyle:
    skin: Tuple[int, int, int]
    hair: Tuple[int, int, int]
    pants: Tuple[int, int, int]
    background: Tuple[int, int, int]
    long_hair: bool


def _rgb(c) -> Tuple[int, int, int]:
    return tuple(int(round(255 * v)) for v in c)


def garment_style(rng: np.random.Generator) -> GarmentStyle:
    return GarmentStyle(
        base=_rgb(rng.uniform(0.1, 0.9, 3)),
        stripe=_rgb(rng.uniform(0.1, 0.9, 3)),
        period=int(rng.integers(6, 18)),
        sleeves=SLEEVES[int(rng.integers(0, len(SLEEVES)))],
    )


def model_style(rng: np.random.Generator, long_hair_fraction: float) -> ModelStyle:
    return ModelStyle(
        skin=_rgb(SKIN_TONES[int(rng.integers(0, len(SKIN_TONES)))]),
        hair=_rgb(HAIR_COLORS[int(rng.integers(0, len(HAIR_COLORS)))]),
        pants=_rgb(rng.uniform(0.05, 0.5, 3)),
        background=_rgb(rng.uniform(0.75, 1.0, 3)),
        long_hair=bool(rng.random() < long_hair_fraction),
    )


def random_pose(rng: np.random.Generator) -> np.ndarray:
    """Template pose with jittered arms, legs, scale and offset, in frame pixels."""
    p = TEMPLATE_POSE.copy()

    def rotate(points: np.ndarray, center: np.ndarray, angle: float) -> np.ndarray:
        c, s = np.cos(angle), np.sin(angle)
        d = points - center
        return center + d @ np.array([[c, s], [-s, c]])

    for shoulder, elbow, wrist, sign in ((2, 3, 4, 1.0), (5, 6, 7, -1.0)):
        a = sign * rng.uniform(-0.15, 0.6)
        p[[elbow, wrist]] = rotate(p[[elbow, wrist]], p[shoulder], a)
        p[[wrist]] = rotate(p[[wrist]], p[elbow], sign * rng.uniform(-0.2, 0.8))
    for hip, knee, ankle, sign in ((8, 9, 10, 1.0), (11, 12, 13, -1.0)):
        p[[knee, ankle]] = rotate(p[[knee, ankle]], p[hip], sign * rng.uniform(-0.05, 0.15))

    neck = p[1].copy()
    p = neck + (p - neck) * rng.uniform(0.9, 1.02)
    p += rng.uniform([-10, -6], [10, 6])
    p[:, 0] = np.clip(p[:, 0], 2, FRAME_WIDTH - 3)
    p[:, 1] = np.clip(p[:, 1], 2, FRAME_HEIGHT - 3)
    return p


class _Canvas:
    """RGB image and label mask drawn with the same primitives."""

    def __init__(self, width: int, height: int, background: Tuple[int, int, int]):
        self.size = (width, height)
        self.image = Image.new("RGB", self.size, background)
        self.mask = Image.new("L", self.size, int(SegLabel.BACKGROUND))

    def fill(self, shape: Callable[[ImageDraw.ImageDraw], None], label: SegLabel, color=None, texture: Image.Image = None) -> None:
        layer = Image.new("L", self.size, 0)
        shape(ImageDraw.Draw(layer))
        box = (0, 0) + self.size
        if texture is not None:
            self.image.paste(texture, (0, 0), layer)
        else:
            self.image.paste(color, box, layer)
        self.mask.paste(int(label), box, layer)


def _stripes(size: Tuple[int, int], style: GarmentStyle, scale: float) -> Image.Image:
    w, h = size
    period = max(2, int(style.period * scale))
    rows = (np.arange(h) // (period // 2)) % 2 == 1
    arr = np.empty((h, w, 3), dtype=np.uint8)
    arr[:] = style.base
    arr[rows] = style.stripe
    return Image.fromarray(arr)


def _limb(a: Point, b: Point, width: float):
    def draw(d: ImageDraw.ImageDraw) -> None:
        d.line([a, b], fill=255, width=int(round(width)))
        r = width / 2.0
        for x, y in (a, b):
            d.ellipse([x - r, y - r, x + r, y + r], fill=255)
    return draw


def draw_figure(
    pose: np.ndarray,
    garment: GarmentStyle,
    model: ModelStyle,
    scale: float = 1.5,
) -> Tuple[Image.Image, Image.Image, np.ndarray]:
    """Render one figure at ``scale`` times the frame size; returns (image, mask, raw keypoints)."""
    width, height = int(round(FRAME_WIDTH * scale)), int(round(FRAME_HEIGHT * scale))
    p = [tuple(xy * scale) for xy in pose]
    canvas = _Canvas(width, height, model.background)
    texture = _stripes(canvas.size, garment, scale)
    limb_w, leg_w = 11 * scale, 16 * scale

    for hip, knee, ankle in ((8, 9, 10), (11, 12, 13)):
        canvas.fill(_limb(p[hip], p[knee], leg_w), SegLabel.LOWER_CLOTHES, model.pants)
        canvas.fill(_limb(p[knee], p[ankle], leg_w), SegLabel.LOWER_CLOTHES, model.pants)

    # neck first so the collar overlaps it
    canvas.fill(_limb(p[0], p[1], 9 * scale), SegLabel.FACE, model.skin)
    pad = 4 * scale
    torso = [
        (p[2][0] - pad, p[2][1] - pad), (p[5][0] + pad, p[5][1] - pad),
        (p[11][0] + pad, p[11][1] + pad), (p[8][0] - pad, p[8][1] + pad),
    ]
    canvas.fill(lambda d: d.polygon(torso, fill=255), SegLabel.UPPER_CLOTHES, texture=texture)

    for (shoulder, elbow, wrist), arm_label in (((2, 3, 4), SegLabel.RIGHT_ARM), ((5, 6, 7), SegLabel.LEFT_ARM)):
        upper_garment = garment.sleeves in ("short", "long")
        lower_garment = garment.sleeves == "long"
        for (a, b), covered in (((shoulder, elbow), upper_garment), ((elbow, wrist), lower_garment)):
            if covered:
                canvas.fill(_limb(p[a], p[b], limb_w * 1.15), SegLabel.UPPER_CLOTHES, texture=texture)
            else:
                canvas.fill(_limb(p[a], p[b], limb_w), arm_label, model.skin)

    nose = p[0]
    head_r = 14 * scale
    head = [nose[0] - head_r * 0.85, nose[1] - head_r, nose[0] + head_r * 0.85, nose[1] + head_r]
    canvas.fill(lambda d: d.ellipse(head, fill=255), SegLabel.FACE, model.skin)
    cap = [head[0] - 2 * scale, head[1] - 3 * scale, head[2] + 2 * scale, nose[1] - 4 * scale]
    canvas.fill(lambda d: d.pieslice(cap, 180, 360, fill=255), SegLabel.HAIR, model.hair)
    if model.long_hair:
        # hangs over the shoulders and the top of the garment
        x0, x1 = p[16][0] - 6 * scale, p[17][0] + 6 * scale
        y0, y1 = nose[1], p[1][1] + 46 * scale
        canvas.fill(lambda d: d.rectangle([x0, y0, x1, y1], fill=255), SegLabel.HAIR, model.hair)
        canvas.fill(lambda d: d.ellipse(head[:2] + [head[2], nose[1] + head_r * 0.6], fill=255), SegLabel.FACE, model.skin)

    raw = np.hstack([np.asarray(p, dtype=np.float64), np.full((len(p), 1), 2.0)])
    return canvas.image, canvas.mask, raw


def generate_dataset(
    out_dir: PathLike,
    n_garments: int = 5,
    models_per_garment: int = 4,
    seed: int = 0,
    scale: float = 1.5,
    long_hair_fraction: float = 0.25,
) -> List[Path]:
    """
    Write a garment-grouped source tree:
    ``<out>/g<NN>/m<NN>_v0.png`` with ``.json`` pose and ``_mask.png`` label mask.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    models = [model_style(rng, long_hair_fraction) for _ in range(max(models_per_garment * 2, 1))]
    written: List[Path] = []
    for g in range(n_garments):
        style = garment_style(rng)
        gdir = out / f"g{g:02d}"
        gdir.mkdir(parents=True, exist_ok=True)
        picks = rng.choice(len(models), size=models_per_garment, replace=False)
        for k in picks:
            image, mask, raw = draw_figure(random_pose(rng), style, models[int(k)], scale)
            stem = f"m{int(k):02d}_v0"
            img_path = gdir / f"{stem}.png"
            image.save(img_path, format="PNG")
            mask.save(gdir / f"{stem}_mask.png", format="PNG")
            (gdir / f"{stem}.json").write_text(json.dumps({"keypoints": raw.tolist()}), encoding="utf-8")
            written.append(img_path)
    logger.info("Wrote %d synthetic images in %d garment groups to %s", len(written), n_garments, out)
    return written
