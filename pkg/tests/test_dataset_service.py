import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH, IngestConfig, PipelineConfig
from app.core.exceptions import ManifestError
from app.helpers.synthetic import TEMPLATE_POSE
from app.schemas import SegLabel
from app.services.dataset_service import (
    build_pairs,
    build_texture_triplets,
    ingest_dataset,
    load_catalog,
    load_manifest,
    load_user,
    split_groups,
)


def _write_record(path: Path, size=(384, 512), keypoints=None, mask_value: int = SegLabel.UPPER_CLOTHES) -> None:
    """``size`` is PIL (width, height); keypoints are in raw pixels."""
    path.parent.mkdir(parents=True, exist_ok=True)
    w, h = size
    rng = np.random.default_rng(0)
    Image.fromarray((rng.random((h, w, 3)) * 255).astype(np.uint8)).save(path)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[h // 4: h // 2, w // 4: 3 * w // 4] = mask_value
    Image.fromarray(mask).save(path.with_name(f"{path.stem}_mask.png"))
    if keypoints is None:
        keypoints = np.hstack([TEMPLATE_POSE * (w / FRAME_WIDTH), np.full((18, 1), 2.0)])
    path.with_suffix(".json").write_text(json.dumps({"keypoints": np.asarray(keypoints).tolist()}))


@pytest.fixture
def two_groups(tmp_path) -> Path:
    src = tmp_path / "src"
    for g in ("ga", "gb"):
        for m in ("m1", "m2"):
            _write_record(src / g / f"{m}_front.png")
    return src


def _cfg(**ingest) -> PipelineConfig:
    return PipelineConfig(ingest=IngestConfig(**{"catalog_groups": 1, "test_fraction": 0.0, **ingest}))


def test_ingest_resizes_into_the_frame(two_groups, tmp_path):
    manifest = ingest_dataset(two_groups, tmp_path / "out", _cfg())
    assert len(manifest.records) == 4
    assert set(manifest.groups()) == {"ga", "gb"}
    root = Path(manifest.root)
    for r in manifest.records:
        with Image.open(root / r.image_path) as im:
            assert im.size == (FRAME_WIDTH, FRAME_HEIGHT)
        with Image.open(root / r.seg_path) as im:
            assert im.size == (FRAME_WIDTH, FRAME_HEIGHT)
    entry = load_catalog(manifest, None)[0]
    # 512x384 halves exactly into 256x192
    np.testing.assert_allclose(entry.pose.xy(), TEMPLATE_POSE, atol=1e-9)
    assert set(np.unique(entry.seg_mask)) == {SegLabel.BACKGROUND, SegLabel.UPPER_CLOTHES}
    assert (tmp_path / "out" / "manifest.json").exists()


def test_ingest_center_crops_tall_images(tmp_path, caplog):
    src = tmp_path / "src"
    raw = np.hstack([TEMPLATE_POSE * 2, np.full((18, 1), 2.0)])
    raw[:, 1] += 44  # 600 rows crop to the middle 512
    raw[0] = (100, 10, 2)  # above the crop
    _write_record(src / "ga" / "m1_front.png", size=(384, 600), keypoints=raw)
    _write_record(src / "ga" / "m2_front.png", size=(384, 600), keypoints=raw)
    with caplog.at_level("WARNING"):
        manifest = ingest_dataset(src, tmp_path / "out", _cfg())
    pose = load_catalog(manifest, None)[0].pose
    assert (pose.keypoints[0].x, pose.keypoints[0].y, pose.keypoints[0].v) == (50.0, 0.0, 2)
    assert any("nose" in r.getMessage() and "clamped" in r.getMessage() for r in caplog.records)
    np.testing.assert_allclose(pose.xy()[1:], TEMPLATE_POSE[1:], atol=1e-9)


def test_ingest_keeps_joints_on_the_last_column(tmp_path):
    src = tmp_path / "src"
    raw = np.hstack([TEMPLATE_POSE * 2, np.full((18, 1), 2.0)])
    raw[4] = (383.5, 200.0, 2)  # 191.75 in the frame
    raw[7] = (390.0, 200.0, 1)  # past the right edge
    _write_record(src / "ga" / "m1_front.png", keypoints=raw)
    _write_record(src / "ga" / "m2_front.png", keypoints=raw)
    manifest = ingest_dataset(src, tmp_path / "out", _cfg())
    pose = load_catalog(manifest, None)[0].pose
    assert (pose.keypoints[4].x, pose.keypoints[4].v) == (FRAME_WIDTH - 1.0, 2)
    assert (pose.keypoints[7].x, pose.keypoints[7].y, pose.keypoints[7].v) == (FRAME_WIDTH - 1.0, 100.0, 1)


def test_ingest_is_idempotent(two_groups, tmp_path):
    a = ingest_dataset(two_groups, tmp_path / "a", _cfg())
    b = ingest_dataset(two_groups, tmp_path / "b", _cfg())
    assert a.records == b.records
    for r in a.records:
        assert (tmp_path / "a" / r.image_path).read_bytes() == (tmp_path / "b" / r.image_path).read_bytes()


def test_undecodable_images_are_skipped(two_groups, tmp_path):
    bad = two_groups / "ga" / "m3_front.png"
    bad.write_bytes(b"not a png")
    manifest = ingest_dataset(two_groups, tmp_path / "out", _cfg())
    assert len(manifest.records) == 4
    assert [Path(s["path"]).name for s in manifest.skipped] == ["m3_front.png"]


def test_bad_pose_records_are_skipped(two_groups, tmp_path):
    (two_groups / "gb" / "m2_front.json").write_text(json.dumps({"keypoints": [[1, 2, 2]] * 17}))
    manifest = ingest_dataset(two_groups, tmp_path / "out", _cfg())
    assert len(manifest.records) == 3
    assert len(manifest.skipped) == 1


def test_flat_layout(tmp_path):
    src = tmp_path / "flat"
    for name in ("ga_m1_front.png", "ga_m2_front.png", "gb_m1_front.png"):
        _write_record(src / name)
    manifest = ingest_dataset(src, tmp_path / "out", _cfg(), layout="flat")
    assert [(r.garment_id, r.model_id) for r in manifest.records] == [("ga", "m1"), ("ga", "m2"), ("gb", "m1")]


def test_empty_or_unknown_sources(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ManifestError):
        ingest_dataset(tmp_path / "empty", tmp_path / "out", _cfg())
    with pytest.raises(ManifestError):
        ingest_dataset(tmp_path / "empty", tmp_path / "out", _cfg(), layout="nested")


def test_split_groups_is_seeded():
    ids = [f"g{i:02d}" for i in range(20)]
    cfg = IngestConfig(catalog_groups=5, test_fraction=0.2, seed=3)
    a = split_groups(ids, cfg)
    assert a == split_groups(list(reversed(ids)), cfg)
    assert sum(v == "catalog" for v in a.values()) == 5
    assert sum(v == "test" for v in a.values()) == 3
    assert sum(v == "train" for v in a.values()) == 12
    assert split_groups(ids, IngestConfig(catalog_groups=50)) == {g: "catalog" for g in ids}


def test_whole_groups_share_a_split(manifest):
    for records in manifest.groups().values():
        assert len({r.split for r in records}) == 1
    assert {r.split for r in manifest.records} == {"catalog", "test", "train"}


def test_relocated_manifest_loads(two_groups, tmp_path):
    ingest_dataset(two_groups, tmp_path / "out", _cfg())
    shutil.copytree(tmp_path / "out", tmp_path / "moved")
    shutil.rmtree(tmp_path / "out")
    manifest = load_manifest(tmp_path / "moved")
    assert Path(manifest.root) == (tmp_path / "moved").resolve()
    assert load_user(manifest, manifest.records[0].record_id).image.shape == (FRAME_HEIGHT, FRAME_WIDTH, 3)


def test_missing_files_fail_manifest_load(two_groups, tmp_path):
    manifest = ingest_dataset(two_groups, tmp_path / "out", _cfg())
    (tmp_path / "out" / manifest.records[0].pose_path).unlink()
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "out")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nowhere")


def test_unknown_user_record(manifest):
    with pytest.raises(ManifestError):
        load_user(manifest, "nobody")


def test_pairs_stay_within_garment_groups(two_groups, tmp_path):
    manifest = ingest_dataset(two_groups, tmp_path / "out", _cfg())
    pairs = build_pairs(manifest, split=None)
    assert len(pairs) == 4  # two ordered pairs per two-image group
    assert all(p.source_identity == p.target_identity for p in pairs)
    assert len(build_pairs(manifest, split=None, garment_id="gb")) == 2
    assert len(build_pairs(manifest, split=None, max_pairs=3)) == 3


def test_texture_triplets(manifest):
    triplets = build_texture_triplets(manifest, split="train", max_items=2)
    assert len(triplets) == 2
    t = triplets[0]
    assert t.posed_model.shape == t.user.shape == t.ground_truth.shape == (FRAME_HEIGHT, FRAME_WIDTH, 3)
    assert np.array_equal(t.user, t.ground_truth)
