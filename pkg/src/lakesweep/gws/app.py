"""HTTP front end for :class:`~lakesweep.gws.service.Gateway`."""

from __future__ import annotations

import time

from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.responses import JSONResponse, Response

from ..errors import (
    Conflict,
    ContractViolation,
    InputError,
    InvalidSpec,
    LakesweepError,
    NotFound,
    PackagingError,
    PolicyError,
)
from .service import Gateway


class PayloadTooLarge(InputError):
    pass


def _error(status: int, exc: Exception, **extra) -> JSONResponse:
    body = {"error": str(exc), "kind": type(exc).__name__}
    body.update({k: v for k, v in extra.items() if v is not None})
    return JSONResponse(body, status_code=status)


def _split(text: str | None) -> list[str]:
    return [p.strip() for p in (text or "").split(",") if p.strip()]


def create_app(gateway: Gateway) -> FastAPI:
    app = FastAPI(title="lakesweep gateway", docs_url=None, redoc_url=None)
    app.state.gateway = gateway

    @app.middleware("http")
    async def stamp_receipt(request: Request, call_next):
        request.state.received_at = time.perf_counter()
        return await call_next(request)

    @app.exception_handler(LakesweepError)
    async def lakesweep_error(request: Request, exc: LakesweepError):
        if isinstance(exc, PayloadTooLarge):
            return _error(413, exc)
        if isinstance(exc, PolicyError):
            return _error(403, exc)
        if isinstance(exc, NotFound):
            return _error(404, exc)
        if isinstance(exc, Conflict):
            return _error(409, exc, state=exc.state, fraction=exc.fraction)
        if isinstance(exc, InvalidSpec):
            return _error(400, exc, field=exc.field)
        if isinstance(exc, (InputError, ContractViolation, PackagingError)):
            return _error(400, exc)
        return _error(503, exc)

    async def read_upload(request: Request, archive: UploadFile) -> bytes:
        limit = gateway.max_upload
        declared = request.headers.get("content-length")
        if declared and declared.isdigit() and int(declared) > limit + 64 * 1024:
            raise PayloadTooLarge(f"request of {declared} bytes exceeds the {limit} byte limit")
        data = await archive.read(limit + 1)
        if len(data) > limit:
            raise PayloadTooLarge(f"upload exceeds the {limit} byte limit")
        return data

    @app.post("/experiment")
    async def submit_experiment(request: Request, archive: UploadFile = File(...)):
        data = await read_upload(request, archive)
        uid = gateway.submit_experiment(data, received_at=request.state.received_at)
        return {"uid": uid}

    @app.post("/experiment/sweep")
    async def submit_sweep(request: Request, archive: UploadFile = File(...), params: str = Form(...)):
        data = await read_upload(request, archive)
        uid = gateway.submit_sweep(data, params, received_at=request.state.received_at)
        return {"uid": uid}

    @app.post("/experiment/sampled")
    async def submit_sampled(request: Request, archive: UploadFile = File(...),
                             description: str = Form(...)):
        data = await read_upload(request, archive)
        uid = gateway.submit_sampled(data, description, received_at=request.state.received_at)
        return {"uid": uid}

    @app.get("/experiment/{uid}/status")
    def status(uid: str):
        return gateway.status(uid)

    @app.get("/experiment/{uid}/results")
    def results(uid: str, sims: str | None = None, columns: str | None = None):
        try:
            sim_ids = [int(s) for s in _split(sims)]
        except ValueError:
            raise InputError(f"sims must be comma-separated integers, got {sims!r}") from None
        data = gateway.results(uid, sim_ids or None, _split(columns) or None)
        return Response(data, media_type="application/zip",
                        headers={"content-disposition": f'attachment; filename="{uid}.zip"'})

    @app.post("/experiment/{uid}/abort")
    def abort(uid: str):
        return gateway.abort(uid)

    @app.get("/service/health")
    def health():
        return gateway.health()

    return app
