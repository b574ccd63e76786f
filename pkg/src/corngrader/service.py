"""HTTP inference service: three models loaded once, a health probe, and a
multipart image endpoint that answers with per-stage verdicts.

Models are read-only after startup, so requests may run concurrently without
locking and a soak of identical uploads returns identical answers.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image

from .backbone import StageModel
from .cascade import HierarchicalLabel, infer_hierarchical
from .training import CheckpointError, file_sha256, load_checkpoint

DEFAULT_MAX_UPLOAD = 10 * 1024 * 1024


@dataclass(frozen=True)
class ModelBundle:
    f1: StageModel
    f2: StageModel
    f3: StageModel
    versions: dict

    @property
    def models(self) -> tuple[StageModel, StageModel, StageModel]:
        return (self.f1, self.f2, self.f3)


def bundle_from_models(f1, f2, f3, versions=None) -> ModelBundle:
    if versions is None:
        versions = {f"stage{s}": "unversioned" for s in (1, 2, 3)}
    return ModelBundle(f1, f2, f3, dict(versions))


def load_bundle(path1, path2, path3) -> ModelBundle:
    """Load and validate the three stage checkpoints; a bad file aborts with
    a message naming which stage it was for."""
    models = []
    versions = {}
    for stage, path in ((1, path1), (2, path2), (3, path3)):
        try:
            model, _ = load_checkpoint(path, expected_stage=stage)
        except (OSError, CheckpointError) as exc:
            raise RuntimeError(f"stage {stage} checkpoint failed to load: {exc}") from exc
        models.append(model)
        versions[f"stage{stage}"] = file_sha256(path)[:12]
    return ModelBundle(models[0], models[1], models[2], versions)


def _stage_payload(decision) -> dict:
    return {
        "prediction": decision.predicted_class,
        "confidence": decision.confidence,
        "probabilities": decision.probabilities(),
    }


def response_from_label(label: HierarchicalLabel, versions: dict) -> dict:
    """The analyze-response body; stages never reached report not_applicable."""
    by_stage = {d.stage: d for d in label.decisions}
    body = {}
    for stage in (1, 2, 3):
        key = f"stage{stage}"
        if stage in by_stage:
            body[key] = _stage_payload(by_stage[stage])
        else:
            body[key] = {"status": "not_applicable"}
    body["summary"] = label.render()
    body["model_versions"] = dict(versions)
    return body


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def create_app(bundle: ModelBundle, max_upload_bytes: int = DEFAULT_MAX_UPLOAD) -> FastAPI:
    app = FastAPI(title="corngrader", docs_url=None, redoc_url=None)

    @app.get("/health")
    def health():
        return {"status": "ok", "model_versions": dict(bundle.versions)}

    @app.post("/analyze")
    async def analyze(request: Request):
        form = await request.form()
        upload = form.get("image")
        if upload is None or isinstance(upload, str):
            return _error(400, "missing_image", "multipart field 'image' is required")
        raw = await upload.read()
        if len(raw) > max_upload_bytes:
            return _error(
                413,
                "image_too_large",
                f"upload of {len(raw)} bytes exceeds the {max_upload_bytes} byte limit",
            )
        try:
            with Image.open(io.BytesIO(raw)) as img:
                array = np.asarray(img.convert("RGB"))
        except Exception:
            return _error(400, "undecodable_image", "the uploaded file is not a decodable image")
        label = infer_hierarchical(bundle.f1, bundle.f2, bundle.f3, array)
        return response_from_label(label, bundle.versions)

    return app


def serve(bundle: ModelBundle, host: str, port: int, max_upload_bytes: int = DEFAULT_MAX_UPLOAD):
    import uvicorn

    uvicorn.run(create_app(bundle, max_upload_bytes), host=host, port=port, log_level="warning")
