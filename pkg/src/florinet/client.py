"""Device-side runtime: workflow registration plus the full round protocol.

A workflow is an (app, workflow) name pair bound to a trainer callback; the
runtime polls for offers and, per accepted offer, walks one round end to end:

    register (fresh keypair) -> fetch round config -> download model ->
    train -> clip/noise (local DP) -> quantize + mask (secure aggregation) ->
    upload -> poll status until the round resolves

The trainer receives the raw model payload bytes and the round id and returns
a delta (list of floats or ndarray) or a ``(delta, metrics)`` pair; async
trainer callables are awaited.  The runtime never uploads an unclipped vector
when DP is on, and generates a fresh X25519 keypair for every round.

Network failures back off exponentially (base 1 s, cap 60 s) without killing
the loop; trainer exceptions mark the round failed and the loop continues.
"""

from __future__ import annotations

import asyncio
import base64
import inspect
import json
import secrets
import time
from dataclasses import dataclass, field

import httpx
import numpy as np

from . import codec, privacy, secagg
from .errors import FlorinetError

BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 60.0

# transport-level failures worth a retry (httpx or a raw-socket session)
TRANSIENT_ERRORS = (httpx.TransportError, OSError, asyncio.TimeoutError)


@dataclass
class WorkflowDetails:
    """One trainable workflow on this device."""

    app_name: str
    workflow_name: str
    trainer: object  # callable(model_bytes, round_id) -> delta | (delta, metrics)
    selector: object | None = None  # callable(offer) -> bool; None accepts all


@dataclass
class ClientConfig:
    endpoint: str
    api_key: str = "dev-client"
    client_id: str = field(default_factory=lambda: "client-" + secrets.token_hex(4))
    metadata: dict = field(default_factory=dict)
    attestation_provider: object | None = None  # callable(client_id) -> str
    poll_interval: float = 2.0
    status_interval: float = 0.25
    status_interval_cap: float = 2.0  # status polls back off toward this
    request_timeout_s: float = 600.0
    dp_noise_seed: int | None = None  # reproducible local-DP noise (simulations)


@dataclass
class RunReport:
    attempted: int = 0
    completed: int = 0
    rejected: int = 0
    failed: int = 0
    abandoned: int = 0
    outcomes: list = field(default_factory=list)

    def record(self, outcome: str) -> None:
        self.outcomes.append(outcome)
        if outcome == "completed":
            self.completed += 1
        elif outcome == "rejected":
            self.rejected += 1
        elif outcome in ("abandoned", "late"):
            self.abandoned += 1
        else:
            self.failed += 1


class ApiError(FlorinetError):
    """Server-side error envelope surfaced to the runtime."""

    def __init__(self, status: int, code: str, message: str, retryable: bool):
        super().__init__(message, code=code, retryable=retryable)
        self.status = status


class FederatedLearningClient:
    def __init__(self, config: ClientConfig, http_client: httpx.AsyncClient | None = None):
        self.config = config
        self._http = http_client
        self._owns_http = http_client is None

    # public entry points ----------------------------------------------------

    def execute(self, workflows: list[WorkflowDetails], stop=None, max_rounds: int | None = None) -> RunReport:
        """Blocking wrapper; ``stop`` may be a threading.Event."""
        return asyncio.run(self.execute_async(workflows, stop=stop, max_rounds=max_rounds))

    async def execute_async(
        self,
        workflows: list[WorkflowDetails],
        stop=None,
        max_rounds: int | None = None,
    ) -> RunReport:
        if not workflows:
            raise FlorinetError("at least one workflow is required")
        http = self._http or httpx.AsyncClient(
            base_url=self.config.endpoint,
            timeout=httpx.Timeout(self.config.request_timeout_s),
        )
        report = RunReport()
        try:
            await asyncio.gather(
                *[self._workflow_loop(http, wf, stop, report, max_rounds) for wf in workflows]
            )
        finally:
            if self._owns_http:
                await http.aclose()
        return report

    # protocol loop ----------------------------------------------------------

    def _client_info(self, wf: WorkflowDetails) -> dict:
        attestation = ""
        if self.config.attestation_provider is not None:
            attestation = self.config.attestation_provider(self.config.client_id)
        return {
            "client_id": self.config.client_id,
            "app_name": wf.app_name,
            "workflow_name": wf.workflow_name,
            "metadata": self.config.metadata,
            "attestation": attestation,
        }

    async def _workflow_loop(self, http, wf, stop, report: RunReport, max_rounds) -> None:
        backoff = BACKOFF_BASE_S
        while not (stop is not None and stop.is_set()):
            if max_rounds is not None and report.attempted >= max_rounds:
                return
            try:
                offers = await self._advertise(http, wf)
            except (*TRANSIENT_ERRORS, ApiError) as exc:
                if isinstance(exc, ApiError) and not exc.retryable:
                    raise
                await _sleep_unless(stop, backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)
                continue
            backoff = BACKOFF_BASE_S

            offer = offers[0] if offers else None
            if offer is not None and wf.selector is not None and not wf.selector(offer):
                offer = None  # device opted out of this round
            if offer is None:
                await _sleep_unless(stop, self.config.poll_interval)
                continue

            report.attempted += 1
            try:
                outcome = await self._run_round(http, wf, offer, stop)
            except (*TRANSIENT_ERRORS, ApiError) as exc:
                if isinstance(exc, ApiError) and exc.code in ("round_full", "attestation", "criteria", "public_key_required"):
                    outcome = "rejected"
                else:
                    outcome = "failed"
                    await _sleep_unless(stop, backoff)
                    backoff = min(backoff * 2, BACKOFF_CAP_S)
            except Exception:
                outcome = "failed"  # trainer raised; keep the loop alive
            report.record(outcome)

    async def _run_round(self, http, wf, offer, stop) -> str:
        task_id = offer["task_id"]
        keypair = secagg.generate_keypair()
        body = {
            "client_info": self._client_info(wf),
            "public_key_b64": base64.b64encode(keypair.public).decode(),
        }
        try:
            reg = await self._req(http, "POST", f"/v1/tasks/{task_id}/register", json=body)
        except ApiError as exc:
            if exc.status in (403,):
                return "rejected"
            raise
        ticket = reg["ticket"]["token"]

        try:
            config = await self._round_config(http, task_id, ticket, stop)
        except ApiError as exc:
            if exc.code in ("regroup", "late", "expired_ticket"):
                return "abandoned"
            raise
        deadline = time.monotonic() + config["deadline_s"] if config["deadline_s"] else None

        model_bytes = await self._req_bytes(
            http, "GET", f"/v1/tasks/{task_id}/model/{config['model_version']}"
        )
        started = time.monotonic()
        delta, metrics = await self._call_trainer(wf.trainer, model_bytes, config["round"])
        duration_ms = (time.monotonic() - started) * 1000.0

        delta = codec.as_model_vector(delta)
        if delta.size != config["model_length"]:
            raise FlorinetError(
                f"trainer returned {delta.size} values for a model of length {config['model_length']}"
            )

        dp = config["dp"]
        if dp["mode"] == "local":
            delta = privacy.clip(delta, dp["clip_norm"])
            std = dp["noise_multiplier"] * dp["clip_norm"]
            if self.config.dp_noise_seed is not None:
                rng = np.random.default_rng([self.config.dp_noise_seed, config["round"]])
            else:
                rng = np.random.default_rng()
            delta = privacy.add_gaussian_noise(delta, std, rng)

        if config["secagg"]:
            params = codec.QuantParams.from_dict(config["quant"])
            roster = [
                (entry["index"], base64.b64decode(entry["public_key_b64"]))
                for entry in config["vg"]["roster"]
            ]
            seeds = secagg.pairwise_seeds(
                keypair, config["participant_index"], roster, task_id, config["round"]
            )
            masked = secagg.apply_masks(
                codec.quantize(delta, params), config["participant_index"], seeds
            )
            payload = codec.encode_payload(masked)
        else:
            payload = codec.encode_payload(delta)

        if deadline is not None and time.monotonic() > deadline:
            return "late"  # the server would only reject this upload

        metrics = {**metrics, "duration_ms": duration_ms}
        header = base64.b64encode(json.dumps(metrics).encode()).decode()
        try:
            await self._req(
                http,
                "POST",
                f"/v1/tasks/{task_id}/update",
                params={"ticket": ticket},
                content=payload,
                headers={"X-Florinet-Metrics": header},
            )
        except ApiError as exc:
            if exc.code == "late":
                return "late"
            if exc.code == "regroup":
                return "abandoned"
            raise
        return await self._await_resolution(http, task_id, ticket, config["round"], stop)

    async def _round_config(self, http, task_id, ticket, stop) -> dict:
        while True:
            try:
                return await self._req(
                    http, "GET", f"/v1/tasks/{task_id}/round-config", params={"ticket": ticket}
                )
            except ApiError as exc:
                if exc.code == "not_ready":
                    await _sleep_unless(stop, self.config.status_interval)
                    continue
                raise

    async def _await_resolution(self, http, task_id, ticket, round_id, stop) -> str:
        interval = self.config.status_interval
        while not (stop is not None and stop.is_set()):
            try:
                status = await self._req(
                    http, "GET", f"/v1/tasks/{task_id}/status", params={"ticket": ticket}
                )
            except ApiError as exc:
                if exc.code == "expired_ticket":
                    return "completed"  # round long gone; our update was accepted
                raise
            if status["instruction"] == "regroup":
                return "abandoned"
            if status["instruction"] == "abort" or status["round"] != round_id:
                return "completed"
            await _sleep_unless(stop, interval)
            interval = min(interval * 1.6, self.config.status_interval_cap)
        return "completed"

    async def _call_trainer(self, trainer, model_bytes: bytes, round_id: int):
        result = trainer(model_bytes, round_id)
        if inspect.isawaitable(result):
            result = await result
        if isinstance(result, tuple):
            delta, metrics = result
            return delta, dict(metrics)
        return result, {}

    # http helpers -----------------------------------------------------------

    async def _advertise(self, http, wf) -> list[dict]:
        body = {"client_info": self._client_info(wf)}
        resp = await self._req(http, "POST", "/v1/advertise", json=body)
        return resp["offers"]

    def _headers(self, extra: dict | None = None) -> dict:
        headers = {"X-Florinet-Key": self.config.api_key}
        if extra:
            headers.update(extra)
        return headers

    async def _req(self, http, method, path, headers=None, **kwargs) -> dict:
        r = await http.request(method, path, headers=self._headers(headers), **kwargs)
        return self._parse(r)

    async def _req_bytes(self, http, method, path, **kwargs) -> bytes:
        r = await http.request(method, path, headers=self._headers(), **kwargs)
        if r.status_code != 200:
            self._parse(r)
        return r.content

    def _parse(self, r: httpx.Response):
        if r.status_code == 200:
            return r.json()
        try:
            envelope = r.json()
            raise ApiError(
                r.status_code,
                envelope.get("code", "internal"),
                envelope.get("message", ""),
                bool(envelope.get("retryable", False)),
            )
        except (json.JSONDecodeError, ValueError):
            raise ApiError(r.status_code, "internal", r.text[:200], True)


async def _sleep_unless(stop, seconds: float) -> None:
    if stop is None:
        await asyncio.sleep(seconds)
        return
    step = min(0.05, seconds)
    waited = 0.0
    while waited < seconds and not stop.is_set():
        await asyncio.sleep(step)
        waited += step
