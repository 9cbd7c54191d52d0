import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from app.core.configs import TextureConfig
from app.core.exceptions import ContractError, NoGarmentRegionError, NoSkinReferenceError
from app.schemas import SegLabel, TransferMethodKind
from app.services.ptn_network import TextureTranslationNet
from app.services.texture_service import (
    _to_rgb,
    _to_ycc,
    agnostic_user,
    apply_sleeve_rule,
    choose_method,
    copy_paste_transfer,
    donor_region,
    garment_region,
    occlusion_ratio,
    skin_tone_adjust,
    texture_translation_forward,
)

H, W = 64, 48


def _masks(occluded: int):
    model = np.zeros((H, W), dtype=np.uint8)
    model[10:20, 10:20] = SegLabel.UPPER_CLOTHES  # 100 garment pixels
    user = np.zeros((H, W), dtype=np.uint8)
    rows, cols = np.nonzero(model)
    user[rows[:occluded], cols[:occluded]] = SegLabel.HAIR
    return user, model


def _images():
    rng = np.random.default_rng(0)
    return rng.random((H, W, 3)), rng.random((H, W, 3))


def test_choose_method_at_the_threshold():
    user, model = _masks(5)
    method = choose_method(user, model, TextureConfig(occlusion_threshold=0.05))
    assert method.kind == TransferMethodKind.COPY_PASTE
    assert (method.garment_pixels, method.occluded_pixels) == (100, 5)
    assert method.score == pytest.approx(0.05)

    user, model = _masks(6)
    method = choose_method(user, model, TextureConfig(occlusion_threshold=0.05))
    assert method.kind == TransferMethodKind.TEXTURE_TRANSLATION
    assert method.score == pytest.approx(0.06)


def test_accessories_occlude_but_other_labels_do_not():
    user, model = _masks(0)
    user[10:12, 10:20] = SegLabel.ACCESSORIES
    user[12:20, 10:20] = SegLabel.UPPER_CLOTHES
    assert occlusion_ratio(user, model) == (0.2, 100, 20)


def test_missing_garment_region():
    with pytest.raises(NoGarmentRegionError):
        choose_method(np.zeros((H, W), np.uint8), np.zeros((H, W), np.uint8))


def test_mask_shapes_must_agree():
    with pytest.raises(ContractError):
        occlusion_ratio(np.zeros((H, W), np.uint8), np.zeros((H, W - 1), np.uint8))


def test_copy_paste_radius_zero_is_exact():
    user_img, model_img = _images()
    user, model = _masks(0)
    user[10:13, 10:20] = SegLabel.FACE
    out = copy_paste_transfer(user_img, model_img, user, model, radius=0)
    donor = donor_region(user, model)
    assert donor.sum() == 70
    assert np.array_equal(out[donor], model_img[donor])
    assert np.array_equal(out[~donor], user_img[~donor])


def test_copy_paste_conserves_pixels_beyond_radius():
    user_img, model_img = _images()
    user, model = _masks(0)
    out = copy_paste_transfer(user_img, model_img, user, model, radius=4)
    reach = ndimage.binary_dilation(donor_region(user, model), structure=np.ones((9, 9), bool))
    assert np.array_equal(out[~reach], user_img[~reach])
    assert not np.array_equal(out[reach], user_img[reach])


def test_copy_paste_with_empty_donor():
    user_img, model_img = _images()
    user, model = _masks(100)  # hair covers the whole garment
    out = copy_paste_transfer(user_img, model_img, user, model, radius=2)
    assert np.array_equal(out, user_img)
    with pytest.raises(NoGarmentRegionError):
        copy_paste_transfer(user_img, model_img, user, model, radius=2, strict=True)


def test_garment_region_and_agnostic_user():
    user_img, model_img = _images()
    user, model = _masks(0)
    g = garment_region(model_img, model)
    assert np.array_equal(g[10:20, 10:20], model_img[10:20, 10:20])
    assert np.all(g[30:] == 0.5)
    user[40:50, 5:10] = SegLabel.LEFT_ARM
    user[0:5, 0:5] = SegLabel.FACE
    a = agnostic_user(user_img, user)
    assert np.all(a[40:50, 5:10] == 0.5)
    assert np.array_equal(a[0:5, 0:5], user_img[0:5, 0:5])


def test_color_conversion_round_trip():
    rgb = np.random.default_rng(1).random((10, 3))
    np.testing.assert_allclose(_to_rgb(_to_ycc(rgb)), rgb, atol=1e-12)


def test_skin_tone_matches_reference_mean():
    donor = np.tile([0.8, 0.6, 0.5], (20, 1))
    skin = np.tile([0.45, 0.30, 0.21], (30, 1))
    np.testing.assert_allclose(skin_tone_adjust(donor, skin), skin[:20], atol=1e-9)


def test_skin_tone_keeps_texture_and_clamps():
    rng = np.random.default_rng(2)
    donor = rng.uniform(0.3, 0.7, (50, 3))
    skin = rng.uniform(0.4, 0.6, (40, 3))
    out = skin_tone_adjust(donor, skin)
    assert out.shape == donor.shape
    np.testing.assert_allclose(_to_ycc(out).mean(axis=0), _to_ycc(skin).mean(axis=0), atol=1e-9)
    bright = skin_tone_adjust(np.full((4, 3), 0.1), np.full((4, 3), 1.0) - [0, 0, 0.9])
    assert bright.min() >= 0.0 and bright.max() <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_skin_tone_adjust_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    donor = rng.uniform(0.35, 0.65, (30, 3))
    skin = rng.uniform(0.45, 0.55, (25, 3))
    once = skin_tone_adjust(donor, skin)
    assert 0.0 < once.min() and once.max() < 1.0
    np.testing.assert_allclose(skin_tone_adjust(once, skin), once, atol=1e-6)


def test_skin_tone_without_reference():
    donor = np.full((5, 3), 0.3)
    assert np.array_equal(skin_tone_adjust(donor, np.empty((0, 3))), donor)
    with pytest.raises(NoSkinReferenceError):
        skin_tone_adjust(donor, np.empty((0, 3)), strict=True)


def test_sleeve_rule_triggers_on_enough_pixels():
    user_img, model_img = _images()
    rng = np.random.default_rng(5)
    model_img[30:40, 20:30] = rng.uniform(0.4, 0.6, (10, 10, 3))
    user_img[0:5, 0:5] = rng.uniform(0.4, 0.6, (5, 5, 3))
    user = np.zeros((H, W), np.uint8)
    model = np.zeros((H, W), np.uint8)
    user[30:40, 20:30] = SegLabel.UPPER_CLOTHES
    user[0:5, 0:5] = SegLabel.FACE
    model[30:40, 20:30] = SegLabel.LEFT_ARM
    out, sleeves, warnings = apply_sleeve_rule(user_img, model_img, user, model, 0, TextureConfig(sleeve_min_pixels=50))
    assert sleeves.sum() == 100 and warnings == []
    assert np.array_equal(out[~sleeves], user_img[~sleeves])
    np.testing.assert_allclose(
        _to_ycc(out[sleeves]).mean(axis=0), _to_ycc(user_img[0:5, 0:5].reshape(-1, 3)).mean(axis=0), atol=1e-6,
    )

    out, sleeves, _ = apply_sleeve_rule(user_img, model_img, user, model, 0, TextureConfig(sleeve_min_pixels=101))
    assert not sleeves.any()
    assert np.array_equal(out, user_img)


def test_sleeve_rule_without_skin_warns():
    user_img, model_img = _images()
    user = np.zeros((H, W), np.uint8)
    model = np.zeros((H, W), np.uint8)
    user[30:40, 20:30] = SegLabel.UPPER_CLOTHES
    model[30:40, 20:30] = SegLabel.RIGHT_ARM
    out, sleeves, warnings = apply_sleeve_rule(user_img, model_img, user, model, 0, TextureConfig(sleeve_min_pixels=50))
    assert len(warnings) == 1
    assert np.array_equal(out[sleeves], model_img[sleeves])


def test_texture_translation_forward_keeps_mode():
    torch.manual_seed(0)
    net = TextureTranslationNet(channels=4).train()
    user_img, model_img = _images()
    user, model = _masks(0)
    out = texture_translation_forward(net, garment_region(model_img, model), user_img, user)
    assert out.shape == (H, W, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert net.training
