"""FastAPI application exposing the guard service under /v1/."""

from __future__ import annotations

import json
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from ..ensemble import EnsembleModel
from .config import PipelineConfig, load_config
from .runtime import GuardService, error_response


def build_service(config: Optional[PipelineConfig] = None, model: Optional[EnsembleModel] = None,
                  **kw) -> GuardService:
    """Service from explicit objects, falling back to the environment and the bundled model."""
    config = config or load_config()
    if model is None:
        if config.model_path:
            model = EnsembleModel.load(config.model_path)
        else:
            from ..training import default_model

            model = default_model()
    return GuardService(config, model, **kw)


def _status(body) -> int:
    if body.get("action") != "error":
        return 200
    return 400 if body["error"]["code"] == "invalid_request" else 500


def create_app(service: Optional[GuardService] = None) -> FastAPI:
    service = service or build_service()
    app = FastAPI(title="hallguard", version="1")
    app.state.service = service

    async def _payload(request: Request):
        try:
            return json.loads(await request.body())
        except ValueError:
            return None

    async def _run(handler, request: Request):
        payload = await _payload(request)
        if payload is None:
            body = error_response(None, "invalid_request", "body is not valid JSON")
        else:
            body = await run_in_threadpool(handler, payload)
        return JSONResponse(body, status_code=_status(body))

    @app.post("/v1/detect")
    async def detect(request: Request):
        return await _run(service.handle_detect, request)

    @app.post("/v1/guard")
    async def guard(request: Request):
        return await _run(service.handle_guard, request)

    @app.get("/v1/health")
    async def health():
        return service.health()

    return app
