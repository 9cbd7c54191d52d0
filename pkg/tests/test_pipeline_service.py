import json

import numpy as np
import pytest
import torch
from scipy import ndimage

from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH, PipelineConfig
from app.core.exceptions import CheckpointError, NoCandidatesError, StageError
from app.schemas import Pose, SegLabel, TransferMethod, TransferMethodKind, UserInput
from app.services import pipeline_service
from app.services.checkpoint_service import CheckpointIO
from app.services.dataset_service import load_users
from app.services.pipeline_service import (
    TryOnPipeline,
    inputs_digest,
    load_generator,
    load_texture_net,
    refine_with_tps,
    run_transfer,
    texture_transfer,
    write_result,
)
from app.services.ptn_network import PoseTransferGenerator, TextureTranslationNet
from app.services.texture_service import copy_paste_transfer, donor_region

STAGES = ["select", "pose_transfer", "tps_refine", "choose_method", "texture_transfer"]


def _user(pose: Pose) -> UserInput:
    rng = np.random.default_rng(0)
    mask = np.zeros((FRAME_HEIGHT, FRAME_WIDTH), dtype=np.uint8)
    mask[70:130, 70:120] = SegLabel.UPPER_CLOTHES
    mask[30:45, 88:104] = SegLabel.FACE
    return UserInput(image=rng.random((FRAME_HEIGHT, FRAME_WIDTH, 3)), pose=pose, seg_mask=mask, record_id="u0")


def _meta(g: PoseTransferGenerator):
    return {"phase": "general", "epoch": 1, "step": 1, "architecture": g.architecture(), "loss_weights": {}}


def test_run_transfer_times_every_stage(template_pose, entry_factory, tiny_generator):
    catalog = [entry_factory(template_pose, "g00", "m00"), entry_factory(template_pose, "g01", "m01")]
    result = run_transfer(_user(template_pose), "g01", catalog, tiny_generator)
    assert list(result.stage_seconds) == STAGES
    assert result.selected.index == 1 and result.selected.garment_id == "g01"
    assert result.selected.score == pytest.approx(1.0)
    assert result.final_image.shape == (FRAME_HEIGHT, FRAME_WIDTH, 3)
    assert result.method.kind == TransferMethodKind.COPY_PASTE
    assert result.config_digest == PipelineConfig().digest()
    assert result.tps.skipped_reason is None


def test_copy_paste_result_keeps_distant_user_pixels(template_pose, entry_factory, tiny_generator):
    cfg = PipelineConfig.from_flat({"texture.occlusion_threshold": 1.0, "composite.radius": 4})
    user = _user(template_pose)
    result = run_transfer(user, "g00", [entry_factory(template_pose)], tiny_generator, cfg)
    donor = donor_region(user.seg_mask, result.posed_model_mask)
    assert donor.any()
    reach = ndimage.binary_dilation(donor, structure=np.ones((9, 9), bool))
    assert np.array_equal(result.final_image[~reach], user.image[~reach])
    interior = donor & ~ndimage.binary_dilation(~donor, structure=np.ones((9, 9), bool))
    np.testing.assert_allclose(result.final_image[interior], 0.5)


def test_unknown_garment_fails_in_selection(template_pose, entry_factory, tiny_generator):
    pipeline = TryOnPipeline([entry_factory(template_pose)], tiny_generator)
    with pytest.raises(NoCandidatesError) as e:
        pipeline.run_transfer(_user(template_pose), "zzz")
    assert e.value.stage == "select"
    assert "inputs_digest" in e.value.details


def test_unexpected_failures_are_wrapped_with_the_stage(template_pose, entry_factory, tiny_generator, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(pipeline_service, "generator_forward", broken)
    user = _user(template_pose)
    with pytest.raises(StageError) as e:
        run_transfer(user, "g00", [entry_factory(template_pose)], tiny_generator)
    assert e.value.stage == "pose_transfer"
    assert e.value.to_record()["details"]["inputs_digest"] == inputs_digest(user, "g00", PipelineConfig().digest())


def test_low_oks_is_a_warning_not_an_error(template_pose, entry_factory, tiny_generator):
    shifted = Pose.from_array(np.hstack([np.clip(template_pose.xy() + [40, 0], 0, FRAME_WIDTH - 1), np.full((18, 1), 2.0)]))
    cfg = PipelineConfig.from_flat({"oks.floor": 0.99})
    result = run_transfer(_user(template_pose), "g00", [entry_factory(shifted)], tiny_generator, cfg)
    assert any("pose mismatch" in w for w in result.warnings)


def test_inputs_digest_tracks_inputs(template_pose):
    user = _user(template_pose)
    assert inputs_digest(user, "g00", "abc") == inputs_digest(user, "g00", "abc")
    assert inputs_digest(user, "g00", "abc") != inputs_digest(user, "g01", "abc")


# --- TPS refinement ---

def test_identity_refinement_keeps_the_catalog_mask(template_pose, entry_factory):
    entry = entry_factory(template_pose)
    generated = np.zeros((FRAME_HEIGHT, FRAME_WIDTH, 3))
    refined, mask, diag = refine_with_tps(generated, entry, template_pose, PipelineConfig())
    assert np.array_equal(mask, entry.seg_mask)
    assert diag.n_control_points == 22  # 18 joints and 4 frame corners
    assert diag.max_control_residual < 1e-6
    garment = mask == SegLabel.UPPER_CLOTHES
    np.testing.assert_allclose(refined[garment], 0.5, atol=1e-6)
    assert np.array_equal(refined[~garment], generated[~garment])


def test_refinement_without_texture_paste(template_pose, entry_factory):
    cfg = PipelineConfig.from_flat({"warp.refine_texture": False})
    generated = np.zeros((FRAME_HEIGHT, FRAME_WIDTH, 3))
    refined, _, _ = refine_with_tps(generated, entry_factory(template_pose), template_pose, cfg)
    assert refined is generated


def test_refinement_skips_with_too_few_points(template_pose, entry_factory):
    arr = template_pose.to_array()
    arr[2:] = 0.0
    sparse = Pose.from_array(arr)
    cfg = PipelineConfig.from_flat({"warp.anchor_corners": False})
    entry = entry_factory(template_pose)
    generated = np.zeros((FRAME_HEIGHT, FRAME_WIDTH, 3))
    refined, mask, diag = refine_with_tps(generated, entry, sparse, cfg)
    assert refined is generated
    assert np.array_equal(mask, entry.seg_mask)
    assert diag.skipped_reason == "only 2 matched control points"
    assert diag.n_control_points == 2


# --- texture transfer ---

def _translation_method() -> TransferMethod:
    return TransferMethod(kind=TransferMethodKind.TEXTURE_TRANSLATION, score=0.5, threshold=0.05,
                          garment_pixels=100, occluded_pixels=50)


def test_texture_translation_without_a_network_falls_back(template_pose, entry_factory):
    user = _user(template_pose)
    entry = entry_factory(template_pose)
    final, sleeves, warnings = texture_transfer(user, entry.image, entry.seg_mask, _translation_method(), PipelineConfig())
    assert sleeves == 0
    assert any("fell back to copy-paste" in w for w in warnings)
    assert final.shape == user.image.shape


def test_texture_translation_with_a_network(template_pose, entry_factory):
    torch.manual_seed(0)
    net = TextureTranslationNet(channels=4).eval()
    user = _user(template_pose)
    entry = entry_factory(template_pose)
    cfg = PipelineConfig.from_flat({"composite.radius": 0})
    final, _, warnings = texture_transfer(user, entry.image, entry.seg_mask, _translation_method(), cfg, net)
    assert warnings == []
    outside = user.seg_mask != SegLabel.UPPER_CLOTHES
    assert np.array_equal(final[outside], user.image[outside])
    assert final.min() >= 0.0 and final.max() <= 1.0


def test_empty_donor_warns(template_pose, entry_factory):
    user = _user(template_pose)
    entry = entry_factory(template_pose)
    empty = np.zeros_like(entry.seg_mask)
    method = TransferMethod(kind=TransferMethodKind.COPY_PASTE, score=0.0, threshold=0.05, garment_pixels=0, occluded_pixels=0)
    final, _, warnings = texture_transfer(user, entry.image, empty, method, PipelineConfig())
    assert np.array_equal(final, user.image)
    assert any("empty garment region" in w for w in warnings)


# --- artifacts ---

def test_write_result_files(template_pose, entry_factory, tiny_generator, tmp_path):
    result = run_transfer(_user(template_pose), "g00", [entry_factory(template_pose)], tiny_generator)
    out = write_result(result, tmp_path / "run")
    names = sorted(p.name for p in out.iterdir())
    assert names == ["final.png", "posed_model.png", "posed_model_mask.png", "refined_model.png", "result.json"]
    record = json.loads((out / "result.json").read_text())
    assert record["selected"]["garment_id"] == "g00"
    assert list(record["stage_seconds"]) == sorted(STAGES)
    assert "final_image" not in record


def test_load_generator_uses_recorded_architecture(tmp_path):
    torch.manual_seed(0)
    g = PoseTransferGenerator(base_channels=4, n_blocks=2)
    ref = CheckpointIO(tmp_path, generator=g).save("general_final", _meta(g))
    loaded = load_generator(ref.path)
    assert loaded.architecture() == g.architecture()
    assert not loaded.training
    for a, b in zip(g.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)
    with pytest.raises(CheckpointError) as e:
        load_texture_net(ref.path)
    assert e.value.field == "--texture-checkpoint"


def test_pipeline_from_paths(manifest, tmp_path):
    torch.manual_seed(0)
    g = PoseTransferGenerator(base_channels=4, n_blocks=1)
    ref = CheckpointIO(tmp_path, generator=g).save("general_final", _meta(g))
    pipeline = TryOnPipeline.from_paths(manifest.root, ref.path)
    assert pipeline.garment_ids == sorted({r.garment_id for r in manifest.by_split("catalog")})
    assert pipeline.texture_net is None


@pytest.mark.parametrize("radius", [0, 3, 6])
def test_copy_paste_conserves_pixels_across_the_dataset(manifest, catalog, radius):
    structure = np.ones((2 * radius + 1, 2 * radius + 1), bool)
    for user in load_users(manifest, "test") + load_users(manifest, "train"):
        for entry in catalog:
            out = copy_paste_transfer(user.image, entry.image, user.seg_mask, entry.seg_mask, radius)
            donor = donor_region(user.seg_mask, entry.seg_mask)
            reach = ndimage.binary_dilation(donor, structure=structure) if radius else donor
            assert np.array_equal(out[~reach], user.image[~reach])
