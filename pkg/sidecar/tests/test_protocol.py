import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conrad_sidecar import SidecarSettings, create_app
from conrad_sidecar.backends import ALPHA_BARS, alpha_bar
from conrad_sidecar.wire import WireError, decode_f32, encode_f32


@pytest.fixture
def stub_client():
    return TestClient(create_app(SidecarSettings(mode="stub", feature_dim=64)))


@pytest.fixture
def echo_client():
    return TestClient(create_app(SidecarSettings(mode="echo")))


def image_payload(shape=(8, 8, 3), seed=0):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=shape).astype(np.float32)
    return img, {"image_b64": encode_f32(img), "shape": list(shape)}


class TestHealth:
    def test_health_ok(self, stub_client):
        resp = stub_client.get("/v1/health")
        assert resp.status_code == 200
        assert resp.json()["status"] == "ok"


class TestPredictNoise:
    def test_echo_returns_request_epsilon(self, echo_client):
        img, body = image_payload()
        eps = np.random.default_rng(1).standard_normal(img.shape).astype(np.float32)
        body.update({"t": 100, "cond_id": "x", "epsilon_b64": encode_f32(eps)})
        resp = echo_client.post("/v1/predict_noise", json=body)
        assert resp.status_code == 200
        out = decode_f32(resp.json()["epsilon_b64"], resp.json()["shape"])
        assert np.array_equal(out, eps)

    def test_echo_without_epsilon_is_400(self, echo_client):
        _, body = image_payload()
        body.update({"t": 100, "cond_id": "x"})
        assert echo_client.post("/v1/predict_noise", json=body).status_code == 400

    def test_output_shape_matches_input(self, stub_client):
        for shape in [(4, 4, 3), (8, 6, 3)]:
            _, body = image_payload(shape)
            body.update({"t": 50, "cond_id": "y"})
            resp = stub_client.post("/v1/predict_noise", json=body)
            assert resp.status_code == 200
            assert resp.json()["shape"] == list(shape)

    def test_deterministic_for_fixed_inputs(self, stub_client):
        _, body = image_payload(seed=3)
        body.update({"t": 77, "cond_id": "z"})
        a = stub_client.post("/v1/predict_noise", json=body).json()
        b = stub_client.post("/v1/predict_noise", json=body).json()
        assert a["epsilon_b64"] == b["epsilon_b64"]

    def test_shape_mismatch_400(self, stub_client):
        img, _ = image_payload((4, 4, 3))
        body = {"image_b64": encode_f32(img), "shape": [8, 8, 3], "t": 10, "cond_id": ""}
        assert stub_client.post("/v1/predict_noise", json=body).status_code == 400

    def test_non_finite_payload_400(self, stub_client):
        img = np.full((2, 2, 3), np.inf, dtype=np.float32)
        body = {"image_b64": encode_f32(img), "shape": [2, 2, 3], "t": 10, "cond_id": ""}
        assert stub_client.post("/v1/predict_noise", json=body).status_code == 400

    def test_unknown_cond_id_404_when_registration_required(self):
        client = TestClient(create_app(SidecarSettings(mode="stub", require_registration=True)))
        _, body = image_payload()
        body.update({"t": 10, "cond_id": "never-registered"})
        assert client.post("/v1/predict_noise", json=body).status_code == 404

    def test_unavailable_mode_503(self):
        client = TestClient(create_app(SidecarSettings(mode="unavailable")))
        _, body = image_payload()
        body.update({"t": 10, "cond_id": ""})
        assert client.post("/v1/predict_noise", json=body).status_code == 503


class TestDiracMode:
    def test_analytic_denoiser_recovers_epsilon(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(5)
        target8 = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        path = tmp_path / "target.png"
        Image.fromarray(target8, "RGB").save(path)
        client = TestClient(create_app(SidecarSettings(mode="dirac",
                                                       dirac_target_path=str(path))))
        target = target8.astype(np.float32) / 255.0
        eps = rng.standard_normal(target.shape).astype(np.float32)
        t = 400
        noisy = np.sqrt(alpha_bar(t)) * target + np.sqrt(1 - alpha_bar(t)) * eps
        body = {"image_b64": encode_f32(noisy), "shape": [8, 8, 3], "t": t, "cond_id": ""}
        resp = client.post("/v1/predict_noise", json=body)
        out = decode_f32(resp.json()["epsilon_b64"], [8, 8, 3])
        assert np.abs(out - eps).max() < 1e-4


class TestInvert:
    def test_same_content_same_cond_id(self, stub_client):
        img, _ = image_payload(seed=9)
        body = {"images_b64": [encode_f32(img)], "shape": [8, 8, 3],
                "init_label": "chair", "sample_count": 4}
        a = stub_client.post("/v1/invert", json=body).json()["cond_id"]
        b = stub_client.post("/v1/invert", json=body).json()["cond_id"]
        assert a == b

    def test_different_content_different_cond_id(self, stub_client):
        img1, _ = image_payload(seed=10)
        img2, _ = image_payload(seed=11)
        base = {"shape": [8, 8, 3], "init_label": "chair", "sample_count": 2}
        a = stub_client.post("/v1/invert", json={**base, "images_b64": [encode_f32(img1)]}).json()
        b = stub_client.post("/v1/invert", json={**base, "images_b64": [encode_f32(img2)]}).json()
        assert a["cond_id"] != b["cond_id"]

    def test_registered_cond_id_usable(self):
        client = TestClient(create_app(SidecarSettings(mode="stub", require_registration=True)))
        img, _ = image_payload(seed=12)
        cond = client.post("/v1/invert", json={
            "images_b64": [encode_f32(img)], "shape": [8, 8, 3],
            "init_label": "lamp", "sample_count": 2,
        }).json()["cond_id"]
        body = {"image_b64": encode_f32(img), "shape": [8, 8, 3], "t": 10, "cond_id": cond}
        assert client.post("/v1/predict_noise", json=body).status_code == 200

    def test_empty_image_list_400(self, stub_client):
        body = {"images_b64": [], "shape": [8, 8, 3], "init_label": "x"}
        assert stub_client.post("/v1/invert", json=body).status_code == 400


class TestAuxiliaryEndpoints:
    def test_features_unit_norm(self, stub_client):
        _, body = image_payload(seed=20)
        resp = stub_client.post("/v1/features", json=body).json()
        vec = decode_f32(resp["features_b64"], [resp["dim"]])
        assert resp["dim"] == 64
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-5

    def test_depth_shape(self, stub_client):
        _, body = image_payload((6, 9, 3), seed=21)
        resp = stub_client.post("/v1/depth", json=body).json()
        assert resp["shape"] == [6, 9]
        d = decode_f32(resp["depth_b64"], resp["shape"])
        assert np.isfinite(d).all()

    def test_mask_in_unit_interval(self, stub_client):
        _, body = image_payload((7, 7, 3), seed=22)
        resp = stub_client.post("/v1/mask", json=body).json()
        m = decode_f32(resp["mask_b64"], resp["shape"])
        assert m.min() >= 0.0 and m.max() <= 1.0


class TestSchedule:
    def test_alpha_bar_monotone(self):
        assert all(b < a for a, b in zip(ALPHA_BARS, ALPHA_BARS[1:]))
        assert alpha_bar(1) == pytest.approx(1 - 1e-4)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            alpha_bar(0)


class TestWireGoldenFile:
    def test_response_reserializes_byte_identically(self, stub_client):
        _, body = image_payload(seed=30)
        body.update({"t": 123, "cond_id": "gold"})
        first = stub_client.post("/v1/predict_noise", json=body)
        blob = first.content
        payload = json.loads(blob)
        # decode + re-encode the payload: bytes must survive the round trip
        arr = decode_f32(payload["epsilon_b64"], payload["shape"])
        rebuilt = json.dumps(
            {"epsilon_b64": encode_f32(arr), "shape": payload["shape"]},
            separators=(",", ":"),
        ).encode()
        assert rebuilt == blob

    def test_wire_error_on_bad_base64(self):
        with pytest.raises(WireError):
            decode_f32("!!!not-base64!!!", [2, 2])
