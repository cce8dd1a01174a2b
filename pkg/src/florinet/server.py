"""REST surface binding clients, the CLI, and the dashboard to the orchestrator.

Handlers are thin translations: every orchestrator call is synchronous and
runs atomically on the event loop, which is what serializes mutations per
task.  Registration is the one long-poll: the handler parks until the cohort
is drawn (it ticks its own task while waiting, so deadlines fire even without
the background ticker).

Error responses share one envelope: ``{"code": str, "message": str,
"retryable": bool}``.  JSON bodies are rendered canonically (sorted keys,
no spaces) so recorded fixtures replay byte-identically.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import contextlib
import hmac
import json
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import uvicorn
from fastapi import Depends, FastAPI, Request, Response, UploadFile, File
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import schema
from .errors import FlorinetError, ProtocolError
from .orchestrator import Orchestrator, Pending, Rejected, Ticket
from .store import FileTaskStore
from .taskspec import ClientInfo

log = logging.getLogger("florinet.server")

API_KEY_HEADER = "X-Florinet-Key"
METRICS_HEADER = "X-Florinet-Metrics"

# stable error code -> HTTP status (enumerated in the README error table)
STATUS_BY_CODE = {
    "unauthorized": 401,
    "not_found": 404,
    "invalid_spec": 400,
    "codec": 400,
    "bad_action": 400,
    "protocol": 400,
    "bad_ticket": 403,
    "expired_ticket": 403,
    "attestation": 403,
    "round_full": 403,
    "criteria": 403,
    "public_key_required": 403,
    "duplicate": 409,
    "late": 409,
    "terminal": 409,
    "illegal_transition": 409,
    "not_ready": 409,
    "regroup": 410,
    "dp_disabled": 404,
    "store": 500,
    "aggregation": 500,
    "internal": 500,
}

RETRYABLE_CODES = {"not_ready", "round_full", "internal", "store"}


def _jsonable(obj):
    """Coerce payloads to strict JSON: non-finite floats become null."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _jsonable(obj.item())
    return obj


class CanonicalJSONResponse(JSONResponse):
    def render(self, content) -> bytes:
        return json.dumps(
            _jsonable(content), sort_keys=True, separators=(",", ":"), allow_nan=False
        ).encode("utf-8")


def error_response(code: str, message: str) -> CanonicalJSONResponse:
    status = STATUS_BY_CODE.get(code, 500)
    return CanonicalJSONResponse(
        {"code": code, "message": message, "retryable": code in RETRYABLE_CODES},
        status_code=status,
    )


REJECTION_CODES = {
    "attestation": "attestation",
    "round full": "round_full",
    "criteria": "criteria",
    "secagg requires a public key": "public_key_required",
}


def create_app(
    orch: Orchestrator,
    *,
    admin_key: str,
    client_key: str,
    tick_interval: float = 0.05,
    ui_root: str | Path | None = None,
) -> FastAPI:
    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        async def ticker():
            while True:
                try:
                    orch.tick()
                except Exception:
                    log.exception("tick failed")
                await asyncio.sleep(app.state.tick_interval)

        task = asyncio.create_task(ticker())
        try:
            yield
        finally:
            task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await task

    app = FastAPI(
        title="florinet",
        default_response_class=CanonicalJSONResponse,
        docs_url=None,
        redoc_url=None,
        lifespan=lifespan,
    )
    app.state.orch = orch
    app.state.tick_interval = tick_interval

    progress_events: dict[str, asyncio.Event] = {}

    def progress_event(task_id: str) -> asyncio.Event:
        event = progress_events.get(task_id)
        if event is None:
            event = progress_events[task_id] = asyncio.Event()
        return event

    def wake_waiters(task_id: str) -> None:
        event = progress_events.get(task_id)
        if event is not None:
            event.set()

    orch.set_progress_hook(wake_waiters)

    def check_key(request: Request, allowed: tuple[str, ...]) -> None:
        supplied = request.headers.get(API_KEY_HEADER, "")
        if not any(hmac.compare_digest(supplied, key) for key in allowed if key):
            raise ProtocolError("missing or invalid api key", code="unauthorized")

    def client_auth(request: Request) -> None:
        check_key(request, (client_key, admin_key))

    def admin_auth(request: Request) -> None:
        check_key(request, (admin_key,))

    @app.exception_handler(FlorinetError)
    async def florinet_error_handler(request: Request, exc: FlorinetError):
        return error_response(exc.code, str(exc))

    @app.exception_handler(RequestValidationError)
    async def request_validation_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        return error_response("protocol", f"malformed request: {first.get('msg', 'invalid body')}")

    @app.exception_handler(404)
    async def not_found_handler(request: Request, exc):
        return error_response("not_found", f"no route {request.url.path}")

    @app.exception_handler(Exception)
    async def unhandled_handler(request: Request, exc: Exception):
        log.exception("unhandled error on %s", request.url.path)
        return error_response("internal", str(exc))

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    # ------------------------------------------------------------- client api

    @app.post("/v1/advertise", dependencies=[Depends(client_auth)])
    async def advertise(body: dict):
        schema.validate("advertise_request", body)
        client = ClientInfo.from_dict(body.get("client_info", {}))
        return {"offers": orch.advertise(client)}

    @app.post("/v1/tasks/{task_id}/register", dependencies=[Depends(client_auth)])
    async def register(task_id: str, body: dict):
        schema.validate("register_request", body)
        client = ClientInfo.from_dict(body.get("client_info", {}))
        public_key = None
        if body.get("public_key_b64"):
            try:
                public_key = base64.b64decode(body["public_key_b64"], validate=True)
            except (binascii.Error, ValueError) as exc:
                raise ProtocolError(f"bad public key encoding: {exc}", code="codec")
            if len(public_key) != 32:
                raise ProtocolError("public key must be 32 bytes", code="codec")
        outcome = orch.register(task_id, client, public_key)
        while isinstance(outcome, Pending):
            # parked until the cohort is drawn; the progress hook wakes us,
            # with a timeout fallback that also enforces the task's deadlines
            event = progress_event(task_id)
            event.clear()
            with contextlib.suppress(asyncio.TimeoutError):
                await asyncio.wait_for(event.wait(), timeout=0.25)
            orch.tick(task_id)
            outcome = orch.poll_registration(task_id, outcome.registration_id)
        if isinstance(outcome, Rejected):
            code = REJECTION_CODES.get(outcome.reason, "round_full")
            return error_response(code, outcome.reason)
        return {"ticket": outcome.to_dict()}

    @app.get("/v1/tasks/{task_id}/round-config", dependencies=[Depends(client_auth)])
    async def round_config(task_id: str, ticket: str):
        return orch.round_config(task_id, ticket)

    @app.get("/v1/tasks/{task_id}/model/{version}", dependencies=[Depends(client_auth)])
    async def get_model(task_id: str, version: int):
        blob = orch.get_model(task_id, version)
        return Response(content=blob, media_type="application/octet-stream")

    @app.post("/v1/tasks/{task_id}/update", dependencies=[Depends(client_auth)])
    async def submit_update(task_id: str, ticket: str, request: Request):
        payload = await request.body()
        metrics = {}
        header = request.headers.get(METRICS_HEADER)
        if header:
            try:
                metrics = json.loads(base64.b64decode(header))
            except Exception as exc:
                raise ProtocolError(f"bad metrics header: {exc}", code="codec")
            if not isinstance(metrics, dict):
                raise ProtocolError("metrics header must hold a JSON object", code="codec")
        return orch.submit_update(task_id, ticket, payload, metrics)

    @app.get("/v1/tasks/{task_id}/status", dependencies=[Depends(client_auth)])
    async def status(task_id: str, ticket: str):
        return orch.status(task_id, ticket)

    # -------------------------------------------------------------- admin api

    @app.post("/admin/v1/tasks", dependencies=[Depends(admin_auth)])
    async def create_task(spec: UploadFile = File(...), model: UploadFile = File(...)):
        try:
            spec_doc = json.loads(await spec.read())
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"spec is not valid JSON: {exc}", code="invalid_spec")
        schema.validate("task_spec", spec_doc)
        model_bytes = await model.read()
        task_id = orch.create_task(spec_doc, model_bytes)
        orch.tick(task_id)
        return {"task_id": task_id}

    @app.get("/admin/v1/tasks", dependencies=[Depends(admin_auth)])
    async def list_tasks():
        return {"tasks": orch.list_tasks()}

    @app.get("/admin/v1/tasks/{task_id}", dependencies=[Depends(admin_auth)])
    async def get_task(task_id: str):
        return orch.get_task(task_id)

    @app.post("/admin/v1/tasks/{task_id}/{action}", dependencies=[Depends(admin_auth)])
    async def control(task_id: str, action: str):
        if action not in ("pause", "resume", "cancel"):
            raise ProtocolError(f"unknown action {action!r}", code="bad_action")
        return {"lifecycle": orch.control(task_id, action)}

    @app.get("/admin/v1/tasks/{task_id}/metrics", dependencies=[Depends(admin_auth)])
    async def metrics(task_id: str):
        return orch.get_metrics(task_id)

    @app.get("/admin/v1/tasks/{task_id}/privacy", dependencies=[Depends(admin_auth)])
    async def privacy(task_id: str):
        return orch.get_privacy(task_id)

    if ui_root is not None and Path(ui_root).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_root), html=True), name="ui")

    return app


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    data_root: str | None = None
    admin_key: str = "dev-admin"
    client_key: str = "dev-client"
    log_level: str = "info"
    ui_root: str | None = None
    tick_interval: float = 0.05


def build_server(config: ServerConfig) -> tuple[FastAPI, Orchestrator]:
    store = FileTaskStore(config.data_root) if config.data_root else None
    orch = Orchestrator(store=store)
    if config.data_root:
        orch.restore()
    app = create_app(
        orch,
        admin_key=config.admin_key,
        client_key=config.client_key,
        tick_interval=config.tick_interval,
        ui_root=config.ui_root,
    )
    return app, orch


def serve(config: ServerConfig) -> None:
    """Run the server in the foreground until interrupted."""
    if config.admin_key in ("dev-admin",) or config.client_key in ("dev-client",):
        log.warning("running with development api keys; set --admin-key/--client-key")
    app, _ = build_server(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level=config.log_level)


class EmbeddedServer:
    """Uvicorn on an ephemeral port in a daemon thread (tests, simulator)."""

    def __init__(self, config: ServerConfig | None = None):
        self.config = config or ServerConfig(port=0, log_level="warning")
        self.app, self.orch = build_server(self.config)
        self._server: uvicorn.Server | None = None
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        assert self._server is not None and self._server.servers
        return self._server.servers[0].sockets[0].getsockname()[1]

    @property
    def endpoint(self) -> str:
        return f"http://{self.config.host}:{self.port}"

    def start(self, timeout: float = 15.0) -> "EmbeddedServer":
        uv_config = uvicorn.Config(
            self.app,
            host=self.config.host,
            port=self.config.port,
            log_level=self.config.log_level,
            loop="asyncio",
            access_log=False,
        )
        self._server = uvicorn.Server(uv_config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        import time as _time

        waited = 0.0
        while not self._server.started:
            if not self._thread.is_alive():
                raise RuntimeError("embedded server thread died during startup")
            _time.sleep(0.02)
            waited += 0.02
            if waited > timeout:
                raise TimeoutError("embedded server failed to start")
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10)

    def __enter__(self) -> "EmbeddedServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
