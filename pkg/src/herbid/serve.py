"""Local HTTP inference service.

Fully offline: the model package and herb-info store are loaded from disk
at startup and shared immutably across requests. Endpoints:

    POST /v1/predict           image as raw body, multipart field "image",
                               or JSON {"image_b64": ...}; ?k= for top-k
    GET  /v1/herbs             full catalog
    GET  /v1/herbs/{name}      one herb record or 404
    GET  /v1/health            200 once the model is loaded, else 503

Configuration comes from CLI flags or the HERB_MODEL / HERB_INFO /
HERB_BIND environment variables.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import os

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .dataset import load_herb_info
from .predict import PredictError, load_model, predict_topk

log = logging.getLogger(__name__)

DEFAULT_BIND = "127.0.0.1:8077"
ENV_MODEL = "HERB_MODEL"
ENV_INFO = "HERB_INFO"
ENV_BIND = "HERB_BIND"


def _multipart_image(body: bytes, content_type: str) -> bytes | None:
    """Extract the "image" field (or the first file part) from a multipart
    body. Hand-rolled so the service has no form-parsing dependency."""
    marker = "boundary="
    if marker not in content_type:
        return None
    boundary = content_type.split(marker, 1)[1].split(";")[0].strip().strip('"')
    delim = b"--" + boundary.encode("utf-8")
    fallback = None
    for part in body.split(delim):
        part = part.strip(b"\r\n")
        if not part or part == b"--":
            continue
        if b"\r\n\r\n" not in part:
            continue
        raw_headers, payload = part.split(b"\r\n\r\n", 1)
        headers = raw_headers.decode("utf-8", errors="replace").lower()
        if 'name="image"' in headers:
            return payload
        if "filename=" in headers and fallback is None:
            fallback = payload
    return fallback


def _extract_image(body: bytes, content_type: str) -> tuple[bytes | None, int | None]:
    """Returns (image bytes, k from a JSON body if present)."""
    ctype = (content_type or "").lower()
    if ctype.startswith("multipart/"):
        return _multipart_image(body, content_type), None
    if ctype.startswith("application/json"):
        try:
            doc = json.loads(body)
            encoded = doc.get("image_b64", "")
            k = doc.get("k")
            return base64.b64decode(encoded, validate=True), k
        except (json.JSONDecodeError, binascii.Error, TypeError, AttributeError):
            return None, None
    return body or None, None


def create_app(model_path=None, herb_info_path=None, default_k: int = 5) -> FastAPI:
    app = FastAPI(title="herbid inference service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.model = None
    app.state.herbs = None
    app.state.default_k = default_k
    if model_path:
        app.state.model = load_model(model_path)
        log.info("loaded model %s (%s)", model_path, app.state.model.checksum[:12])
    if herb_info_path:
        app.state.herbs = load_herb_info(herb_info_path)
        log.info("loaded %d herb records", len(app.state.herbs))

    @app.get("/v1/health")
    def health():
        model = app.state.model
        if model is None:
            return JSONResponse({"status": "loading"}, status_code=503)
        return {
            "status": "ok",
            "model_name": model.package.graph.name,
            "package_checksum": model.checksum,
        }

    @app.post("/v1/predict")
    async def predict(request: Request):
        model = app.state.model
        if model is None:
            return JSONResponse({"error": "model not loaded"}, status_code=503)
        body = await request.body()
        image, body_k = _extract_image(body, request.headers.get("content-type", ""))
        if not image:
            return JSONResponse({"error": "no decodable image in request"}, status_code=400)
        if body_k is None:
            body_k = min(app.state.default_k, model.num_classes)  # default clamps, explicit k does not
        k_raw = request.query_params.get("k", body_k)
        try:
            k = int(k_raw)
        except (TypeError, ValueError):
            return JSONResponse({"error": f"k must be an integer, got {k_raw!r}"}, status_code=400)
        try:
            return predict_topk(model, image, k, app.state.herbs)
        except PredictError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)

    @app.get("/v1/herbs")
    def herb_list():
        herbs = app.state.herbs
        return [h.to_dict() for h in herbs.all()] if herbs else []

    @app.get("/v1/herbs/{scientific_name}")
    def herb_lookup(scientific_name: str):
        herbs = app.state.herbs
        info = herbs.lookup(scientific_name) if herbs else None
        if info is None:
            return JSONResponse({"error": f"no herb named {scientific_name!r}"}, status_code=404)
        return info.to_dict()

    return app


def run_server(model_path=None, herb_info_path=None, bind=None, default_k: int = 5) -> None:
    import uvicorn

    model_path = model_path or os.environ.get(ENV_MODEL)
    herb_info_path = herb_info_path or os.environ.get(ENV_INFO)
    bind = bind or os.environ.get(ENV_BIND, DEFAULT_BIND)
    if not model_path:
        raise SystemExit(f"no model package given (flag --model or ${ENV_MODEL})")
    host, _, port = bind.partition(":")
    app = create_app(model_path, herb_info_path, default_k)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8077), log_level="info")
