from pathlib import Path
from typing import Dict

import numpy as np
import pytest
import torch

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH, PipelineConfig
from app.helpers.synthetic import TEMPLATE_POSE, generate_dataset
from app.schemas import CatalogEntry, Manifest, Pose, SegLabel
from app.services.dataset_service import ingest_dataset, load_catalog
from app.services.ptn_network import PoseTransferGenerator

TINY_FLAT: Dict[str, object] = {
    "network.base_channels": 4,
    "network.n_blocks": 1,
    "network.disc_channels": 4,
    "network.disc_layers": 2,
    "network.texture_channels": 4,
    "train.epochs_general": 1,
    "train.epochs_specialized": 1,
    "train.epochs_texture": 1,
    "train.batch_size": 2,
    "metrics.is_provider": "color_histogram",
    "metrics.max_pairs": 2,
    "ingest.catalog_groups": 1,
    "ingest.test_fraction": 0.5,
    "bench.n_requests": 3,
}


@pytest.fixture
def tiny_cfg() -> PipelineConfig:
    return PipelineConfig.from_flat(dict(TINY_FLAT))


@pytest.fixture
def template_pose() -> Pose:
    return Pose.from_array(np.hstack([TEMPLATE_POSE, np.full((18, 1), 2.0)]))


def make_entry(pose: Pose, garment_id: str = "g00", model_id: str = "m00", value: float = 0.5) -> CatalogEntry:
    mask = np.zeros((FRAME_HEIGHT, FRAME_WIDTH), dtype=np.uint8)
    mask[70:130, 70:120] = SegLabel.UPPER_CLOTHES
    return CatalogEntry(
        image=np.full((FRAME_HEIGHT, FRAME_WIDTH, 3), value),
        pose=pose,
        seg_mask=mask,
        garment_id=garment_id,
        model_id=model_id,
        record_id=f"{garment_id}/{model_id}_v0",
    )


@pytest.fixture(scope="session")
def source_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("source")
    generate_dataset(out, n_garments=3, models_per_garment=3, seed=0)
    return out


@pytest.fixture(scope="session")
def manifest(source_dir, tmp_path_factory) -> Manifest:
    cfg = PipelineConfig.from_flat(dict(TINY_FLAT))
    return ingest_dataset(source_dir, tmp_path_factory.mktemp("ingested"), cfg)


@pytest.fixture(scope="session")
def catalog(manifest):
    return load_catalog(manifest)


@pytest.fixture
def tiny_generator() -> PoseTransferGenerator:
    torch.manual_seed(0)
    return PoseTransferGenerator(base_channels=4, n_blocks=1).eval()


@pytest.fixture
def entry_factory():
    return make_entry
