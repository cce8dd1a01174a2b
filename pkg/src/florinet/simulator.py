"""Multi-client simulation harness driving a live server over its public API.

Spawns N in-process client runtimes (asyncio sessions over a shared HTTP
connection pool) against either an embedded server or an external endpoint,
entirely through the wire API: the simulator holds no reference into the
orchestrator.  Three entry points:

* :func:`run_dummy` - every client uploads an all-ones vector for one round;
  the aggregated mean is forced, which makes it the scale-test workload.
* :func:`run_training` - the synthetic classification task: seeded Gaussian
  blobs in 20 dimensions split into 100 shards; each client trains a logistic
  model on 20% of a randomly picked shard per round.  Supports sync,
  sync+local-DP, and buffered-async variants.
* :func:`scaling_sweep` - run_dummy across client counts, CSV out.

Stragglers are simulated by wrapping trainers in a uniform async delay, which
is what makes the sync-vs-async duration comparison meaningful on one host.
"""

from __future__ import annotations

import asyncio
import csv
import io
import json
import time
from dataclasses import dataclass, field
from urllib.parse import urlencode, urlsplit

import httpx
import numpy as np

from . import codec
from .client import ClientConfig, FederatedLearningClient, WorkflowDetails
from .errors import FlorinetError
from .server import EmbeddedServer, ServerConfig
from .trainers import LogisticTrainer, logistic_loss_and_accuracy, make_constant_trainer

APP_NAME = "florinet-sim"
ADMIN_KEY = "sim-admin"
CLIENT_KEY = "sim-client"


class LeanResponse:
    """Just enough of the httpx response surface for the client runtime."""

    __slots__ = ("status_code", "headers", "content")

    def __init__(self, status_code: int, headers: dict, content: bytes):
        self.status_code = status_code
        self.headers = headers
        self.content = content

    def json(self):
        return json.loads(self.content)

    @property
    def text(self) -> str:
        return self.content.decode("utf-8", "replace")


class LeanHttpSession:
    """Minimal keep-alive HTTP/1.1 session on asyncio streams.

    One TCP connection per simulated client: the general-purpose pooled client
    burns more CPU per request than the server itself at a thousand concurrent
    sessions, and a private connection per device is also the honest model of
    a fleet.  Requests are serialized per session (the protocol is sequential
    anyway); a stale keep-alive connection is re-dialed once.
    """

    def __init__(self, endpoint: str, timeout_s: float = 600.0):
        parts = urlsplit(endpoint)
        if parts.scheme != "http" or parts.hostname is None:
            raise FlorinetError(f"lean session needs a plain http endpoint, got {endpoint!r}")
        self._host = parts.hostname
        self._port = parts.port or 80
        self._timeout = timeout_s
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._lock = asyncio.Lock()

    async def _connect(self) -> None:
        self._reader, self._writer = await asyncio.open_connection(self._host, self._port)

    async def aclose(self) -> None:
        if self._writer is not None:
            self._writer.close()
            self._reader = self._writer = None

    async def request(
        self,
        method: str,
        path: str,
        headers: dict | None = None,
        params: dict | None = None,
        json_body=None,
        content: bytes | None = None,
        **kwargs,
    ) -> LeanResponse:
        if "json" in kwargs:  # keep the httpx keyword spelling
            json_body = kwargs.pop("json")
        if kwargs:
            raise TypeError(f"unsupported arguments: {sorted(kwargs)}")
        async with self._lock:
            for attempt in (0, 1):
                if self._reader is None:
                    await self._connect()
                try:
                    return await asyncio.wait_for(
                        self._round_trip(method, path, headers, params, json_body, content),
                        timeout=self._timeout,
                    )
                except (ConnectionError, asyncio.IncompleteReadError, BrokenPipeError):
                    await self.aclose()
                    if attempt:
                        raise
        raise AssertionError("unreachable")

    async def _round_trip(self, method, path, headers, params, json_body, content) -> LeanResponse:
        if params:
            path = path + "?" + urlencode(params)
        body = b""
        extra = dict(headers or {})
        if json_body is not None:
            body = json.dumps(json_body).encode()
            extra["content-type"] = "application/json"
        elif content is not None:
            body = content
            extra.setdefault("content-type", "application/octet-stream")
        lines = [f"{method} {path} HTTP/1.1", f"host: {self._host}:{self._port}"]
        lines += [f"{k}: {v}" for k, v in extra.items()]
        lines.append(f"content-length: {len(body)}")
        request = ("\r\n".join(lines) + "\r\n\r\n").encode() + body
        self._writer.write(request)
        await self._writer.drain()

        status_line = await self._reader.readline()
        if not status_line:
            raise ConnectionResetError("server closed connection")
        status = int(status_line.split(b" ", 2)[1])
        resp_headers: dict[str, str] = {}
        while True:
            line = await self._reader.readline()
            if line in (b"\r\n", b"\n", b""):
                break
            key, _, value = line.decode("latin-1").partition(":")
            resp_headers[key.strip().lower()] = value.strip()
        length = int(resp_headers.get("content-length", "0"))
        payload = await self._reader.readexactly(length) if length else b""
        if resp_headers.get("connection", "").lower() == "close":
            await self.aclose()
        return LeanResponse(status, resp_headers, payload)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    shards: list
    X_test: np.ndarray
    y_test: np.ndarray


def make_blob_dataset(
    seed: int,
    n_samples: int = 20_000,
    dims: int = 20,
    separation: float = 5.0,
    n_shards: int = 100,
    n_test: int = 2_000,
) -> Dataset:
    """Two Gaussian blobs, unit covariance, centers ``separation`` apart."""
    rng = np.random.default_rng(seed)
    total = n_samples + n_test
    y = rng.integers(0, 2, size=total).astype(np.float64)
    direction = rng.standard_normal(dims)
    direction /= np.linalg.norm(direction)
    centers = np.outer(y - 0.5, direction * separation)
    X = rng.standard_normal((total, dims)) + centers
    X_train, y_train = X[:n_samples], y[:n_samples]
    order = rng.permutation(n_samples)
    shards = [np.sort(chunk) for chunk in np.array_split(order, n_shards)]
    return Dataset(X=X_train, y=y_train, shards=shards, X_test=X[n_samples:], y_test=y[n_samples:])


@dataclass
class SimConfig:
    n_clients: int = 32
    clients_per_node: int = 4  # reporting shape only; all clients share a process
    trainer: str = "logistic"  # ones | zeros | logistic
    seed: int = 0
    ramp_s: float = 0.0  # stagger between client starts
    straggler_max_s: float = 0.0  # uniform extra training delay
    mode: str = "sync"  # sync | async
    total_rounds: int = 10
    async_buffer_size: int = 32
    dp: dict = field(default_factory=dict)  # DpConfig fields; empty -> off
    secagg: bool = False
    vg_size: int = 8
    quant_bits: int = 16
    quant_clip: float = 2.0
    endpoint: str | None = None  # None -> embedded server
    admin_key: str = ADMIN_KEY
    client_key: str = CLIENT_KEY
    timeout_s: float = 600.0  # overall simulation watchdog
    lr: float = 0.5
    epochs: int = 5
    subsample: float = 0.2  # fraction of the picked shard used per round
    mu_prox: float = 0.0

    def __post_init__(self):
        if self.n_clients < 1:
            raise FlorinetError("n_clients must be >= 1")


@dataclass
class DummyReport:
    n: int
    task_id: str
    aggregate: list
    mean: list
    duration_s: float
    round_duration_s: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class TrainingReport:
    task_id: str
    mode: str
    n_clients: int
    rounds: int
    accuracy: list  # held-out accuracy per model version 1..N
    round_durations_s: list
    wall_clock_s: float
    diverged: bool
    final_accuracy: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


class _Harness:
    """Endpoint plumbing shared by the sim entry points."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.embedded: EmbeddedServer | None = None
        if cfg.endpoint is None:
            self.embedded = EmbeddedServer(
                ServerConfig(
                    port=0,
                    admin_key=cfg.admin_key,
                    client_key=cfg.client_key,
                    log_level="warning",
                )
            ).start()
            self.endpoint = self.embedded.endpoint
        else:
            self.endpoint = cfg.endpoint

    def close(self):
        if self.embedded is not None:
            self.embedded.stop()

    def http(self) -> httpx.AsyncClient:
        limits = httpx.Limits(
            max_connections=None,
            max_keepalive_connections=max(64, 2 * self.cfg.n_clients),
        )
        return httpx.AsyncClient(base_url=self.endpoint, limits=limits, timeout=httpx.Timeout(600.0))

    async def create_task(self, http: httpx.AsyncClient, spec: dict, model: np.ndarray) -> str:
        files = {
            "spec": ("spec.json", json.dumps(spec).encode(), "application/json"),
            "model": ("model.bin", codec.encode_payload(model), "application/octet-stream"),
        }
        r = await http.post("/admin/v1/tasks", headers={"X-Florinet-Key": self.cfg.admin_key}, files=files)
        if r.status_code != 200:
            raise FlorinetError(f"task creation failed: {r.status_code} {r.text}")
        return r.json()["task_id"]

    async def admin_get(self, http: httpx.AsyncClient, path: str) -> dict:
        r = await http.get(path, headers={"X-Florinet-Key": self.cfg.admin_key})
        if r.status_code != 200:
            raise FlorinetError(f"GET {path} failed: {r.status_code} {r.text}")
        return r.json()

    async def fetch_model(self, http: httpx.AsyncClient, task_id: str, version: int) -> np.ndarray:
        r = await http.get(
            f"/v1/tasks/{task_id}/model/{version}", headers={"X-Florinet-Key": self.cfg.client_key}
        )
        if r.status_code != 200:
            raise FlorinetError(f"model fetch failed: {r.status_code}")
        model = codec.decode_payload(r.content)
        assert isinstance(model, np.ndarray)
        return model

    async def run_clients(self, http, task_id: str, trainers_by_client: list) -> None:
        """Run one runtime per trainer until the task reaches a terminal state."""
        cfg = self.cfg
        stop = asyncio.Event()

        async def monitor():
            while not stop.is_set():
                detail = await self.admin_get(http, f"/admin/v1/tasks/{task_id}")
                if detail["lifecycle"] in ("completed", "cancelled", "failed"):
                    stop.set()
                    if detail["lifecycle"] != "completed":
                        raise FlorinetError(
                            f"task ended {detail['lifecycle']}: {detail.get('failure_reason', '')}"
                        )
                    return
                await asyncio.sleep(0.1)

        # bigger fleets poll more gently so the server stays responsive
        poll = 0.1 if cfg.n_clients <= 64 else 0.4
        status_cap = 0.5 if cfg.n_clients <= 64 else 2.5

        async def one_client(i: int, trainer) -> None:
            if cfg.ramp_s:
                await asyncio.sleep(cfg.ramp_s * i)
            session = LeanHttpSession(self.endpoint, timeout_s=cfg.timeout_s)
            runtime = FederatedLearningClient(
                ClientConfig(
                    endpoint=self.endpoint,
                    api_key=cfg.client_key,
                    client_id=f"sim-{i:05d}",
                    poll_interval=poll,
                    status_interval=0.1,
                    status_interval_cap=status_cap,
                    dp_noise_seed=cfg.seed * 1_000_003 + i,
                ),
                http_client=session,
            )
            workflow = WorkflowDetails(
                app_name=APP_NAME, workflow_name=cfg.trainer, trainer=trainer
            )
            try:
                await runtime.execute_async([workflow], stop=stop)
            finally:
                await session.aclose()

        client_tasks = [
            asyncio.create_task(one_client(i, t)) for i, t in enumerate(trainers_by_client)
        ]
        monitor_task = asyncio.create_task(monitor())
        try:
            await asyncio.wait_for(
                asyncio.gather(monitor_task, *client_tasks), timeout=cfg.timeout_s
            )
        except asyncio.TimeoutError:
            stop.set()
            raise FlorinetError(f"simulation exceeded {cfg.timeout_s}s watchdog")
        finally:
            stop.set()
            for t in [monitor_task, *client_tasks]:
                if not t.done():
                    t.cancel()
            await asyncio.gather(monitor_task, *client_tasks, return_exceptions=True)


def _with_straggle(trainer, max_delay_s: float, rng: np.random.Generator):
    if max_delay_s <= 0:
        return trainer

    async def delayed(model_bytes: bytes, round_id: int):
        await asyncio.sleep(float(rng.uniform(0.0, max_delay_s)))
        return trainer(model_bytes, round_id)

    return delayed


def _base_spec(cfg: SimConfig, name: str) -> dict:
    spec = {
        "task_name": name,
        "app_name": APP_NAME,
        "workflow_name": cfg.trainer,
        "clients_per_round": cfg.n_clients,
        "total_rounds": cfg.total_rounds,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "over_provision": 1.0,
        "timeouts": {"registration_s": 120.0, "key_exchange_s": 60.0, "upload_s": 300.0},
        "eval_interval": 1,
    }
    if cfg.dp:
        spec["dp"] = cfg.dp
    if cfg.mode == "async":
        spec["async_buffer_size"] = cfg.async_buffer_size
        spec["clients_per_round"] = 1
    if cfg.secagg and cfg.mode == "sync":
        spec["secagg_enabled"] = True
        spec["vg_size"] = cfg.vg_size
        spec["quant"] = {"clip_range": cfg.quant_clip, "bits": cfg.quant_bits}
    return spec


def run_dummy(
    n: int,
    vector_len: int = 5,
    *,
    secagg: bool = False,
    vg_size: int = 8,
    quant_bits: int = 16,
    quant_clip: float = 2.0,
    seed: int = 0,
    ramp_s: float = 0.0,
    endpoint: str | None = None,
    timeout_s: float = 300.0,
) -> DummyReport:
    """One round of the all-ones task across ``n`` clients."""
    cfg = SimConfig(
        n_clients=n,
        trainer="ones",
        seed=seed,
        ramp_s=ramp_s,
        mode="sync",
        total_rounds=1,
        secagg=secagg,
        vg_size=vg_size,
        quant_bits=quant_bits,
        quant_clip=quant_clip,
        endpoint=endpoint,
        timeout_s=timeout_s,
    )
    harness = _Harness(cfg)
    try:
        return asyncio.run(_run_dummy_async(harness, cfg, vector_len))
    finally:
        harness.close()


async def _run_dummy_async(harness: _Harness, cfg: SimConfig, vector_len: int) -> DummyReport:
    async with harness.http() as http:
        spec = _base_spec(cfg, f"dummy-n{cfg.n_clients}-s{cfg.seed}-{time.time_ns()}")
        model0 = np.zeros(vector_len)
        started = time.monotonic()
        task_id = await harness.create_task(http, spec, model0)
        trainers_by_client = [make_constant_trainer(1.0) for _ in range(cfg.n_clients)]
        await harness.run_clients(http, task_id, trainers_by_client)
        duration = time.monotonic() - started

        v1 = await harness.fetch_model(http, task_id, 1)
        aggregate = v1 - model0
        metrics = await harness.admin_get(http, f"/admin/v1/tasks/{task_id}/metrics")
        round_durations = [r["duration_s"] for r in metrics["rounds"] if not r["failed"]]
        return DummyReport(
            n=cfg.n_clients,
            task_id=task_id,
            aggregate=(aggregate * cfg.n_clients).tolist(),
            mean=aggregate.tolist(),
            duration_s=duration,
            round_duration_s=round_durations[-1] if round_durations else duration,
        )


def run_training(cfg: SimConfig, dataset: Dataset | None = None) -> TrainingReport:
    """Full federated run of the synthetic classification task."""
    if cfg.trainer not in ("logistic", "ones", "zeros"):
        raise FlorinetError(f"unknown trainer kind {cfg.trainer!r}")
    harness = _Harness(cfg)
    try:
        return asyncio.run(_run_training_async(harness, cfg, dataset))
    finally:
        harness.close()


async def _run_training_async(harness: _Harness, cfg: SimConfig, dataset: Dataset | None) -> TrainingReport:
    dataset = dataset or make_blob_dataset(cfg.seed)
    dims = dataset.X.shape[1]
    model0 = np.zeros(dims + 1)
    straggle_rng = np.random.default_rng([cfg.seed, 1])

    def build_trainer(i: int):
        if cfg.trainer == "ones":
            inner = make_constant_trainer(1.0)
        elif cfg.trainer == "zeros":
            inner = make_constant_trainer(0.0)
        else:
            inner = LogisticTrainer(
                dataset.X,
                dataset.y,
                dataset.shards,
                client_index=i,
                base_seed=cfg.seed,
                lr=cfg.lr,
                epochs=cfg.epochs,
                subsample=cfg.subsample,
                mu_prox=cfg.mu_prox,
            )
        return _with_straggle(inner, cfg.straggler_max_s, straggle_rng)

    async with harness.http() as http:
        name = f"train-{cfg.mode}-n{cfg.n_clients}-s{cfg.seed}-{time.time_ns()}"
        started = time.monotonic()
        task_id = await harness.create_task(http, _base_spec(cfg, name), model0)
        await harness.run_clients(http, task_id, [build_trainer(i) for i in range(cfg.n_clients)])
        wall = time.monotonic() - started

        detail = await harness.admin_get(http, f"/admin/v1/tasks/{task_id}")
        versions = detail["model_version"]
        accuracy = []
        for v in range(1, versions + 1):
            model = await harness.fetch_model(http, task_id, v)
            _, acc = logistic_loss_and_accuracy(model, dataset.X_test, dataset.y_test)
            accuracy.append(acc)
        metrics = await harness.admin_get(http, f"/admin/v1/tasks/{task_id}/metrics")
        durations = [r["duration_s"] for r in metrics["rounds"] if not r["failed"]]
        final = accuracy[-1] if accuracy else 0.0
        return TrainingReport(
            task_id=task_id,
            mode=cfg.mode,
            n_clients=cfg.n_clients,
            rounds=versions,
            accuracy=accuracy,
            round_durations_s=durations,
            wall_clock_s=wall,
            diverged=final < 0.55,
            final_accuracy=final,
        )


def scaling_sweep(
    ns: list[int],
    *,
    vector_len: int = 5,
    seed: int = 0,
    ramp_per_client_s: float = 0.003,
    endpoint: str | None = None,
    timeout_s: float = 300.0,
) -> tuple[list[dict], str]:
    """run_dummy per client count; returns rows and the CSV text."""
    rows = []
    for n in ns:
        try:
            report = run_dummy(
                n,
                vector_len=vector_len,
                seed=seed,
                ramp_s=ramp_per_client_s,
                endpoint=endpoint,
                timeout_s=timeout_s,
            )
            rows.append(
                {
                    "n": n,
                    "duration_ms": round(report.duration_s * 1000.0, 3),
                    "ok": True,
                    "error": "",
                }
            )
        except Exception as exc:
            rows.append({"n": n, "duration_ms": None, "ok": False, "error": str(exc)})
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["n", "duration_ms"])
    for row in rows:
        writer.writerow([row["n"], "" if row["duration_ms"] is None else row["duration_ms"]])
    return rows, buf.getvalue()
