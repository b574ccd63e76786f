"""The HTTP service: response schema, error paths, soak, and concurrency."""

import io
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from corngrader import cli
from corngrader import data as D
from corngrader import service as sv
from corngrader import training as tr
from corngrader.backbone import BackboneConfig, StageSpec, init_stage_model

GOLDEN_DIR = Path(__file__).parent / "golden"
STUB_VERSIONS = {"stage1": "stub", "stage2": "stub", "stage3": "stub"}

# class indices forced per stage for each legal cascade shape
SHAPES = {
    "impure": (0, 0, 0),
    "round": (1, 1, 0),
    "embryo_down": (1, 0, 0),
    "embryo_up": (1, 0, 1),
}


def small_config():
    return BackboneConfig(
        input_resolution=32,
        stages=(
            StageSpec(7, 4, 2, 8, num_blocks=1, num_heads=1, kv_stride=2),
            StageSpec(3, 2, 1, 8, num_blocks=1, num_heads=2, kv_stride=2),
            StageSpec(3, 2, 1, 8, num_blocks=1, num_heads=1, kv_stride=1),
        ),
    )


def constant_model(stage, class_index):
    model = init_stage_model(small_config(), stage=stage, seed=stage)
    model.params["head.weight"].data[...] = 0.0
    bias = np.full(2, -4.0, dtype=np.float32)
    bias[class_index] = 4.0
    model.params["head.bias"].data[...] = bias
    return model


def bundle_for(shape_name):
    s1, s2, s3 = SHAPES[shape_name]
    return sv.bundle_from_models(
        constant_model(1, s1), constant_model(2, s2), constant_model(3, s3), STUB_VERSIONS
    )


def kernel_png() -> bytes:
    rng = np.random.default_rng(np.random.SeedSequence([9, 0xB10B]))
    image = D.blob_image(rng, 32, top=True)
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture(scope="module")
def png_bytes():
    return kernel_png()


def analyze(client, payload, field="image", name="kernel.png"):
    return client.post("/analyze", files={field: (name, payload, "application/octet-stream")})


def assert_structurally_equal(a, b, path="$"):
    if isinstance(a, dict):
        assert isinstance(b, dict) and set(a) == set(b), path
        for k in a:
            assert_structurally_equal(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert isinstance(b, list) and len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            assert_structurally_equal(x, y, f"{path}[{i}]")
    elif isinstance(a, float) or isinstance(b, float):
        assert b == pytest.approx(a, rel=1e-9, abs=1e-12), path
    else:
        assert a == b, path


class TestHealth:
    def test_reports_ok_and_versions(self):
        client = TestClient(sv.create_app(bundle_for("impure")))
        body = client.get("/health").json()
        assert body == {"status": "ok", "model_versions": STUB_VERSIONS}


class TestAnalyzeContract:
    @pytest.mark.parametrize("shape", sorted(SHAPES))
    def test_matches_golden_response(self, shape, png_bytes):
        client = TestClient(sv.create_app(bundle_for(shape)))
        response = analyze(client, png_bytes)
        assert response.status_code == 200
        golden_path = GOLDEN_DIR / f"analyze_{shape}.json"
        if os.environ.get("UPDATE_GOLDENS"):
            golden_path.parent.mkdir(exist_ok=True)
            golden_path.write_text(json.dumps(response.json(), indent=2, sort_keys=True) + "\n")
        golden = json.loads(golden_path.read_text())
        assert_structurally_equal(golden, response.json())

    @pytest.mark.parametrize("shape", sorted(SHAPES))
    def test_not_applicable_exactly_for_skipped_stages(self, shape, png_bytes):
        client = TestClient(sv.create_app(bundle_for(shape)))
        body = analyze(client, png_bytes).json()
        executed = {"impure": 1, "round": 2, "embryo_down": 3, "embryo_up": 3}[shape]
        for stage in (1, 2, 3):
            payload = body[f"stage{stage}"]
            if stage <= executed:
                assert set(payload) == {"prediction", "confidence", "probabilities"}
                probs = payload["probabilities"]
                assert abs(sum(probs.values()) - 1.0) < 1e-6
                assert payload["confidence"] == max(probs.values())
                assert payload["prediction"] == max(probs, key=probs.get)
            else:
                assert payload == {"status": "not_applicable"}

    def test_summary_mirrors_cascade(self, png_bytes):
        client = TestClient(sv.create_app(bundle_for("impure")))
        assert analyze(client, png_bytes).json()["summary"] == "(impure, --, --)"
        client = TestClient(sv.create_app(bundle_for("embryo_up")))
        assert analyze(client, png_bytes).json()["summary"] == "(pure, flat, embryo_up)"


class TestAnalyzeErrors:
    def test_missing_field(self, png_bytes):
        client = TestClient(sv.create_app(bundle_for("impure")))
        response = analyze(client, png_bytes, field="file")
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "missing_image"

    def test_no_multipart_body(self):
        client = TestClient(sv.create_app(bundle_for("impure")))
        response = client.post("/analyze")
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "missing_image"

    def test_text_field_instead_of_file(self):
        client = TestClient(sv.create_app(bundle_for("impure")))
        response = client.post("/analyze", data={"image": "not a file"})
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "missing_image"

    def test_undecodable_payload(self):
        client = TestClient(sv.create_app(bundle_for("impure")))
        response = analyze(client, b"just some text, not an image", name="notes.txt")
        assert response.status_code == 400
        body = response.json()
        assert body["error"]["code"] == "undecodable_image"
        assert "stage1" not in body

    def test_oversized_payload(self, png_bytes):
        client = TestClient(sv.create_app(bundle_for("impure"), max_upload_bytes=1000))
        response = analyze(client, b"\x00" * 2000)
        assert response.status_code == 413
        assert response.json()["error"]["code"] == "image_too_large"
        assert analyze(client, png_bytes).status_code in (200, 413)


class TestBundleLoading:
    def _save_trio(self, tmp_path, shape="embryo_up"):
        s1, s2, s3 = SHAPES[shape]
        paths = []
        for stage, idx in ((1, s1), (2, s2), (3, s3)):
            path = tmp_path / f"stage{stage}.ckpt"
            tr.save_checkpoint(constant_model(stage, idx), [], path)
            paths.append(path)
        return paths

    def test_versions_come_from_files(self, tmp_path):
        p1, p2, p3 = self._save_trio(tmp_path)
        bundle = sv.load_bundle(p1, p2, p3)
        assert bundle.versions["stage2"] == tr.file_sha256(p2)[:12]
        assert bundle.f3.stage == 3

    def test_missing_file_names_its_stage(self, tmp_path):
        p1, _, p3 = self._save_trio(tmp_path)
        with pytest.raises(RuntimeError, match="stage 2 checkpoint"):
            sv.load_bundle(p1, tmp_path / "nope.ckpt", p3)

    def test_wrong_stage_tag_names_its_slot(self, tmp_path):
        p1, p2, p3 = self._save_trio(tmp_path)
        with pytest.raises(RuntimeError, match="stage 1 checkpoint.*tagged stage 2"):
            sv.load_bundle(p2, p2, p3)


class TestServiceStability:
    def test_soak_leaves_checkpoints_untouched(self, tmp_path, png_bytes):
        paths = TestBundleLoading()._save_trio(tmp_path, "impure")
        before = [tr.file_sha256(p) for p in paths]
        client = TestClient(sv.create_app(sv.load_bundle(*paths)))
        first = analyze(client, png_bytes).json()
        for i in range(999):
            response = analyze(client, png_bytes)
            assert response.status_code == 200
            if i % 100 == 0:
                assert response.json() == first
        assert [tr.file_sha256(p) for p in paths] == before

    def test_concurrent_requests_match_serial(self, png_bytes):
        import httpx
        import uvicorn

        app = sv.create_app(bundle_for("embryo_up"))
        server = uvicorn.Server(
            uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        )
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        deadline = time.time() + 10
        while not server.started:
            assert time.time() < deadline, "server did not start"
            time.sleep(0.01)
        port = server.servers[0].sockets[0].getsockname()[1]
        url = f"http://127.0.0.1:{port}/analyze"

        def post():
            response = httpx.post(
                url, files={"image": ("kernel.png", png_bytes, "application/octet-stream")}
            )
            assert response.status_code == 200
            return response.json()

        try:
            serial = [post() for _ in range(4)]
            with ThreadPoolExecutor(max_workers=4) as pool:
                concurrent = list(pool.map(lambda _: post(), range(8)))
        finally:
            server.should_exit = True
            thread.join(timeout=10)

        assert all(body == serial[0] for body in serial[1:])
        assert all(body == serial[0] for body in concurrent)


class TestCliInferParity:
    def test_infer_matches_endpoint(self, tmp_path, png_bytes, capsys):
        paths = TestBundleLoading()._save_trio(tmp_path, "embryo_down")
        image_path = tmp_path / "kernel.png"
        image_path.write_bytes(png_bytes)

        client = TestClient(sv.create_app(sv.load_bundle(*paths)))
        endpoint_body = analyze(client, png_bytes).json()

        code = cli.main(
            [
                "infer",
                "--image",
                str(image_path),
                "--checkpoint-1",
                str(paths[0]),
                "--checkpoint-2",
                str(paths[1]),
                "--checkpoint-3",
                str(paths[2]),
            ]
        )
        assert code == 0
        assert json.loads(capsys.readouterr().out) == endpoint_body
