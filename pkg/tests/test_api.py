from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

import main
from app.core.configs import FRAME_HEIGHT, FRAME_WIDTH, config
from app.helpers.preprocessor import save_image, save_mask
from app.schemas import Pose, SegLabel
from app.services.pipeline_service import TryOnPipeline
from app.services.pose_service import dump_pose

from .conftest import make_entry

MATCH = f"{config.API_V1_STR}/match"
TRANSFER = f"{config.API_V1_STR}/transfer"


def _keypoints(pose: Pose):
    return [{"x": kp.x, "y": kp.y, "v": kp.v} for kp in pose.keypoints]


@pytest.fixture
def unloaded(monkeypatch):
    monkeypatch.setattr(config, "TRYON_MANIFEST", "")
    monkeypatch.setattr(config, "TRYON_CHECKPOINT", "")


@pytest.fixture
def client(unloaded, template_pose, tiny_generator, tmp_path, monkeypatch):
    monkeypatch.setattr(config, "TRYON_OUT_DIR", str(tmp_path / "api"))
    shifted = Pose.from_array(np.hstack([template_pose.xy() + [12, 0], np.full((18, 1), 2.0)]))
    catalog = [
        make_entry(template_pose, "g00", "m00"),
        make_entry(shifted, "g00", "m01"),
        make_entry(template_pose, "g01", "m02"),
    ]
    with TestClient(main.app) as c:
        main.app.state.pipeline = TryOnPipeline(catalog, tiny_generator)
        yield c


def test_unloaded_service_answers_503(unloaded, template_pose):
    with TestClient(main.app) as c:
        r = c.post(MATCH, json={"keypoints": _keypoints(template_pose)})
    assert r.status_code == 503


def test_match_ranks_by_oks(client, template_pose):
    r = client.post(MATCH, json={"keypoints": _keypoints(template_pose)})
    assert r.status_code == 200
    body = r.json()
    assert body["total_candidates"] == body["returned"] == 3
    assert [c["index"] for c in body["results"]] == [0, 2, 1]
    assert [c["rank"] for c in body["results"]] == [1, 2, 3]
    assert body["results"][0]["score"] == pytest.approx(1.0)


def test_match_top_k_and_garment_filter(client, template_pose):
    body = client.post(MATCH, json={"keypoints": _keypoints(template_pose), "top_k": 2}).json()
    assert body["total_candidates"] == 3 and body["returned"] == 2
    body = client.post(MATCH, json={"keypoints": _keypoints(template_pose), "garment_id": "g01"}).json()
    assert [c["record_id"] for c in body["results"]] == ["g01/m02_v0"]


def test_match_rejects_bad_poses(client, template_pose):
    keypoints = _keypoints(template_pose)
    assert client.post(MATCH, json={"keypoints": keypoints[:17]}).status_code == 422
    keypoints[3] = {"x": FRAME_WIDTH + 5.0, "y": 10.0, "v": 2}
    r = client.post(MATCH, json={"keypoints": keypoints})
    assert r.status_code == 400
    assert "outside the frame" in r.json()["detail"]


def test_match_unknown_garment_is_404(client, template_pose):
    r = client.post(MATCH, json={"keypoints": _keypoints(template_pose), "garment_id": "zzz"})
    assert r.status_code == 404
    assert r.json()["detail"]["error"] == "no_candidates"


def _user_files(tmp_path: Path, pose: Pose):
    rng = np.random.default_rng(0)
    image, pose_path, mask = tmp_path / "user.png", tmp_path / "user.json", tmp_path / "user_mask.png"
    save_image(rng.random((FRAME_HEIGHT, FRAME_WIDTH, 3)), image)
    pose_path.write_text(dump_pose(pose))
    m = np.zeros((FRAME_HEIGHT, FRAME_WIDTH), dtype=np.uint8)
    m[70:130, 70:120] = SegLabel.UPPER_CLOTHES
    save_mask(m, mask)
    return {"user_image_path": str(image), "user_pose_path": str(pose_path), "user_mask_path": str(mask)}


def test_transfer_writes_outputs(client, template_pose, tmp_path):
    r = client.post(TRANSFER, json={**_user_files(tmp_path, template_pose), "garment_id": "g01"})
    assert r.status_code == 200
    body = r.json()
    assert body["selected"]["index"] == 2
    assert body["method"]["kind"] == "copy_paste"
    out = Path(body["output_dir"])
    assert out.parent == tmp_path / "api"
    assert (out / "final.png").exists() and (out / "result.json").exists()


def test_transfer_with_missing_files_is_400(client, tmp_path):
    missing = {k: str(tmp_path / "nope.png") for k in ("user_image_path", "user_pose_path", "user_mask_path")}
    r = client.post(TRANSFER, json={**missing, "garment_id": "g00"})
    assert r.status_code == 400
    assert r.json()["detail"]["error"] == "contract_error"


def test_transfer_unknown_garment_is_404(client, template_pose, tmp_path):
    r = client.post(TRANSFER, json={**_user_files(tmp_path, template_pose), "garment_id": "zzz"})
    assert r.status_code == 404
    assert r.json()["detail"]["stage"] == "select"
