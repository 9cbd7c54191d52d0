import logging
import os
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from PIL import Image

from app.core.exceptions import ContractError
from app.schemas.texture_schemas import SegLabel

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# one color per SegLabel, for mask previews
LABEL_PALETTE = np.array([
    [0, 0, 0], [128, 64, 0], [255, 200, 160], [220, 30, 30], [30, 30, 200], [240, 150, 40],
    [240, 220, 40], [40, 160, 60], [60, 200, 200], [160, 60, 200], [128, 128, 128],
], dtype=np.uint8)

GRID_COLUMNS = ("user.png", "catalog.png", "posed_model.png", "refined_model.png", "posed_model_mask.png", "final.png")


def colorize_mask(mask: np.ndarray) -> np.ndarray:
    idx = np.clip(np.asarray(mask, dtype=np.int64), 0, int(max(SegLabel)))
    return LABEL_PALETTE[idx].astype(np.float64) / 255.0


def tile(rows: Sequence[Sequence[np.ndarray]], pad: int = 4, background: float = 1.0) -> np.ndarray:
    """Tile equally sized (H, W, 3) images into a grid; short rows are padded with background."""
    if not rows or not any(rows):
        raise ContractError("nothing to tile", field="rows")
    shapes = {np.asarray(im).shape for row in rows for im in row}
    if len(shapes) != 1:
        raise ContractError(f"grid cells differ in shape: {sorted(shapes)}", field="rows")
    h, w, c = next(iter(shapes))
    n_cols = max(len(row) for row in rows)
    out = np.full((pad + len(rows) * (h + pad), pad + n_cols * (w + pad), c), background, dtype=np.float64)
    for r, row in enumerate(rows):
        for k, im in enumerate(row):
            y, x = pad + r * (h + pad), pad + k * (w + pad)
            out[y:y + h, x:x + w] = im
    return out


def _load_cell(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("L", "P"):
            return colorize_mask(np.asarray(im))
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def grid_from_results(result_dirs: Sequence[PathLike], out_path: PathLike, pad: int = 4) -> Path:
    """One row per transfer output directory: inputs, intermediates and the final image."""
    rows: List[List[np.ndarray]] = []
    for d in result_dirs:
        d = Path(d)
        cells = [_load_cell(d / name) for name in GRID_COLUMNS if (d / name).exists()]
        if not cells:
            logger.warning("No images found in %s; row skipped", d)
            continue
        rows.append(cells)
    grid = tile(rows, pad)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)).save(out, format="PNG")
    logger.info("Wrote %dx%d comparison grid to %s", len(rows), max(len(r) for r in rows), out)
    return out
