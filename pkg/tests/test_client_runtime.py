"""Client runtime protocol tests against real and scripted servers."""

import asyncio
import base64
import json

import httpx
import numpy as np
import pytest

from conftest import FakeClock, make_spec
from florinet import client as client_mod
from florinet import codec, trainers
from florinet.client import ClientConfig, FederatedLearningClient, RunReport, WorkflowDetails
from florinet.orchestrator import Orchestrator
from florinet.server import create_app
from florinet.trainers import LogisticTrainer, fedprox_penalty, make_constant_trainer

ADMIN = {"X-Florinet-Key": "adm"}


def make_server():
    clock = FakeClock()
    counter = iter(range(1, 1000))
    orch = Orchestrator(clock=clock, id_factory=lambda: f"t-{next(counter):04d}")
    app = create_app(orch, admin_key="adm", client_key="cli")
    return app, orch, clock


async def create_task_http(app, spec_dict, model_values):
    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport, base_url="http://test") as hc:
        files = {
            "spec": ("spec.json", json.dumps(spec_dict).encode(), "application/json"),
            "model": ("model.bin", codec.encode_payload(np.asarray(model_values, dtype=np.float64)), "application/octet-stream"),
        }
        r = await hc.post("/admin/v1/tasks", headers=ADMIN, files=files)
        assert r.status_code == 200, r.text
        return r.json()["task_id"]


def runtime_client(app, i=0, **cfg_over):
    cfg = ClientConfig(
        endpoint="http://test",
        api_key="cli",
        client_id=f"c{i:03d}",
        poll_interval=0.02,
        status_interval=0.02,
    )
    for k, v in cfg_over.items():
        setattr(cfg, k, v)
    http = httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://test")
    return FederatedLearningClient(cfg, http_client=http), http


def wf(trainer, selector=None):
    return WorkflowDetails(app_name="app", workflow_name="wf", trainer=trainer, selector=selector)


class TestExecuteLoop:
    def test_no_offers_reports_zero_attempts(self):
        app, orch, _ = make_server()  # no tasks at all

        async def scenario():
            fl, http = runtime_client(app)
            stop = asyncio.Event()

            async def stopper():
                await asyncio.sleep(0.15)
                stop.set()

            report, _ = await asyncio.gather(
                fl.execute_async([wf(make_constant_trainer())], stop=stop), stopper()
            )
            await http.aclose()
            return report

        report = asyncio.run(scenario())
        assert report.attempted == 0

    def test_zero_trainer_delivers_zero_delta(self):
        app, orch, _ = make_server()

        async def scenario():
            task_id = await create_task_http(
                app, make_spec(clients_per_round=1, total_rounds=1).to_dict(), [5.0, 6.0]
            )
            fl, http = runtime_client(app)
            report = await fl.execute_async([wf(trainers.make_zero_trainer())], max_rounds=1)
            await http.aclose()
            return task_id, report

        task_id, report = asyncio.run(scenario())
        assert report.completed == 1
        model = codec.decode_payload(orch.get_model(task_id, 1))
        assert model.tolist() == [5.0, 6.0]  # zero delta leaves the model unchanged

    def test_selector_false_skips_offer(self):
        app, orch, _ = make_server()

        async def scenario():
            await create_task_http(app, make_spec(clients_per_round=1).to_dict(), [0.0])
            fl, http = runtime_client(app)
            stop = asyncio.Event()

            async def stopper():
                await asyncio.sleep(0.15)
                stop.set()

            report, _ = await asyncio.gather(
                fl.execute_async([wf(make_constant_trainer(), selector=lambda offer: False)], stop=stop),
                stopper(),
            )
            await http.aclose()
            return report

        report = asyncio.run(scenario())
        assert report.attempted == 0

    def test_trainer_exception_keeps_loop_alive(self):
        # real clock: the abandoned round must hit its upload deadline and retry
        import time as _time

        counter = iter(range(1, 100))
        orch = Orchestrator(clock=_time.time, id_factory=lambda: f"t-{next(counter):04d}")
        app = create_app(orch, admin_key="adm", client_key="cli")

        def bad_trainer(model_bytes, round_id):
            raise RuntimeError("boom")

        async def scenario():
            spec = make_spec(
                clients_per_round=1,
                total_rounds=3,
                retry_limit=10,
                timeouts={"registration_s": 5.0, "key_exchange_s": 5.0, "upload_s": 0.2},
            ).to_dict()
            await create_task_http(app, spec, [0.0])
            stop_tick = asyncio.Event()

            async def ticker():
                while not stop_tick.is_set():
                    orch.tick()
                    await asyncio.sleep(0.02)

            tick_task = asyncio.create_task(ticker())
            fl, http = runtime_client(app)
            report = await fl.execute_async([wf(bad_trainer)], max_rounds=2)
            stop_tick.set()
            await tick_task
            await http.aclose()
            return report

        report = asyncio.run(scenario())
        assert report.attempted == 2
        assert report.failed == 2

    def test_plaintext_payload_is_exactly_the_trainer_delta(self):
        app, orch, _ = make_server()
        delta = [0.25, -0.5, 1.75]

        def trainer(model_bytes, round_id):
            return np.array(delta), {"loss": 0.1}

        async def scenario():
            task_id = await create_task_http(
                app, make_spec(clients_per_round=1, total_rounds=1).to_dict(), [0.0, 0.0, 0.0]
            )
            fl, http = runtime_client(app)
            report = await fl.execute_async([wf(trainer)], max_rounds=1)
            await http.aclose()
            return task_id, report

        task_id, report = asyncio.run(scenario())
        assert report.completed == 1
        model = codec.decode_payload(orch.get_model(task_id, 1))
        assert model.tolist() == delta  # single client: mean == delta, bit-exact

    def test_async_trainer_supported(self):
        app, orch, _ = make_server()

        async def trainer(model_bytes, round_id):
            await asyncio.sleep(0)
            return np.array([2.0]), {"loss": 0.0}

        async def scenario():
            task_id = await create_task_http(
                app, make_spec(clients_per_round=1, total_rounds=1).to_dict(), [1.0]
            )
            fl, http = runtime_client(app)
            report = await fl.execute_async([wf(trainer)], max_rounds=1)
            await http.aclose()
            return task_id, report

        task_id, report = asyncio.run(scenario())
        assert report.completed == 1
        assert codec.decode_payload(orch.get_model(task_id, 1)).tolist() == [3.0]


class TestSecAggRounds:
    def test_group_of_two_aggregates_known_sum(self):
        app, orch, _ = make_server()
        deltas = {0: [1.0, -0.5, 0.25, 0.0], 1: [0.5, 0.5, -0.25, 1.0]}

        def trainer_for(i):
            def trainer(model_bytes, round_id):
                return np.array(deltas[i]), {"loss": 0.0}
            return trainer

        async def scenario():
            spec = make_spec(
                clients_per_round=2,
                total_rounds=1,
                secagg_enabled=True,
                vg_size=2,
                quant={"clip_range": 2.0, "bits": 16},
            ).to_dict()
            task_id = await create_task_http(app, spec, [0.0] * 4)
            fls = []
            for i in range(2):
                fl, http = runtime_client(app, i=i)
                fls.append((fl, http))
            reports = await asyncio.gather(
                *[fl.execute_async([wf(trainer_for(i))], max_rounds=1) for i, (fl, _) in enumerate(fls)]
            )
            for _, http in fls:
                await http.aclose()
            return task_id, reports

        task_id, reports = asyncio.run(scenario())
        assert all(r.completed == 1 for r in reports)
        model = codec.decode_payload(orch.get_model(task_id, 1))
        expected = (np.array(deltas[0]) + np.array(deltas[1])) / 2
        tol = 2 * 2.0 / (2**16 - 1)
        assert np.max(np.abs(model - expected)) <= tol

    def test_fresh_keypair_each_round(self):
        app, orch, _ = make_server()
        seen_keys = []

        class RecordingTransport(httpx.ASGITransport):
            async def handle_async_request(self, request):
                if request.url.path.endswith("/register"):
                    body = json.loads(request.content)
                    seen_keys.append(body["public_key_b64"])
                return await super().handle_async_request(request)

        async def scenario():
            spec = make_spec(
                clients_per_round=1,
                total_rounds=2,
                secagg_enabled=False,
            ).to_dict()
            await create_task_http(app, spec, [0.0])
            cfg = ClientConfig(
                endpoint="http://test", api_key="cli", client_id="c000",
                poll_interval=0.02, status_interval=0.02,
            )
            http = httpx.AsyncClient(transport=RecordingTransport(app=app), base_url="http://test")
            fl = FederatedLearningClient(cfg, http_client=http)
            report = await fl.execute_async([wf(make_constant_trainer())], max_rounds=2)
            await http.aclose()
            return report

        report = asyncio.run(scenario())
        assert report.completed == 2
        assert len(seen_keys) == 2
        assert seen_keys[0] != seen_keys[1]


class TestLocalDp:
    def test_uploaded_norm_respects_clip(self):
        # mu = 0 isolates the clipping path: uploaded payload must have norm <= C
        app, orch, _ = make_server()

        def trainer(model_bytes, round_id):
            v = np.array([1.2, 1.6])  # norm 2.0
            return v, {}

        async def scenario():
            spec = make_spec(
                clients_per_round=1,
                total_rounds=1,
                dp={"mode": "local", "clip_norm": 0.5, "noise_multiplier": 0.0, "delta": 1e-5},
            ).to_dict()
            task_id = await create_task_http(app, spec, [0.0, 0.0])
            fl, http = runtime_client(app)
            report = await fl.execute_async([wf(trainer)], max_rounds=1)
            await http.aclose()
            return task_id, report

        task_id, report = asyncio.run(scenario())
        assert report.completed == 1
        model = codec.decode_payload(orch.get_model(task_id, 1))
        assert np.linalg.norm(model) <= 0.5 + 1e-12
        assert np.allclose(model, np.array([1.2, 1.6]) * 0.25)

    def test_clip_applied_before_noise(self, monkeypatch):
        calls = []
        real_clip, real_noise = client_mod.privacy.clip, client_mod.privacy.add_gaussian_noise
        monkeypatch.setattr(
            client_mod.privacy, "clip", lambda *a, **k: calls.append("clip") or real_clip(*a, **k)
        )
        monkeypatch.setattr(
            client_mod.privacy,
            "add_gaussian_noise",
            lambda *a, **k: calls.append("noise") or real_noise(*a, **k),
        )
        app, orch, _ = make_server()

        async def scenario():
            spec = make_spec(
                clients_per_round=1,
                total_rounds=1,
                dp={"mode": "local", "clip_norm": 0.5, "noise_multiplier": 0.1, "delta": 1e-5},
            ).to_dict()
            await create_task_http(app, spec, [0.0, 0.0])
            fl, http = runtime_client(app)
            report = await fl.execute_async([wf(make_constant_trainer())], max_rounds=1)
            await http.aclose()
            return report

        report = asyncio.run(scenario())
        assert report.completed == 1
        assert calls == ["clip", "noise"]


class ScriptedServer:
    """MockTransport handler exercising specific protocol branches."""

    def __init__(self):
        self.advertise_failures = 0
        self.config_response = None
        self.calls = []

    def handler(self, request: httpx.Request) -> httpx.Response:
        path = request.url.path
        self.calls.append(path)
        if path == "/v1/advertise":
            if self.advertise_failures > 0:
                self.advertise_failures -= 1
                raise httpx.ConnectError("connection refused", request=request)
            return httpx.Response(200, json={"offers": [{"task_id": "t-1", "round": 1}]})
        if path.endswith("/register"):
            ticket = {
                "token": "tok.mac",
                "task_id": "t-1",
                "round": 1,
                "vg_id": 0,
                "participant_index": 0,
                "expires_at": 9e9,
            }
            return httpx.Response(200, json={"ticket": ticket})
        if path.endswith("/round-config"):
            if self.config_response is not None:
                return self.config_response(request)
            return httpx.Response(
                410, json={"code": "regroup", "message": "group dissolved", "retryable": False}
            )
        if path.endswith("/model/0"):
            return httpx.Response(
                200,
                content=codec.encode_payload(np.zeros(2)),
                headers={"content-type": "application/octet-stream"},
            )
        if path.endswith("/update"):
            return httpx.Response(
                409, json={"code": "late", "message": "past deadline", "retryable": False}
            )
        if path.endswith("/status"):
            return httpx.Response(
                200,
                json={"phase": "selecting", "round": 2, "lifecycle": "running", "instruction": "proceed"},
            )
        return httpx.Response(404, json={"code": "not_found", "message": path, "retryable": False})


class TestErrorBranches:
    def run_one(self, scripted, max_rounds=1, **cfg_over):
        async def scenario():
            cfg = ClientConfig(
                endpoint="http://fake", api_key="cli", client_id="c000",
                poll_interval=0.01, status_interval=0.01,
            )
            for k, v in cfg_over.items():
                setattr(cfg, k, v)
            http = httpx.AsyncClient(
                transport=httpx.MockTransport(scripted.handler), base_url="http://fake"
            )
            fl = FederatedLearningClient(cfg, http_client=http)
            report = await fl.execute_async([wf(make_constant_trainer())], max_rounds=max_rounds)
            await http.aclose()
            return report

        return asyncio.run(scenario())

    def test_network_failures_backoff_then_recover(self, monkeypatch):
        monkeypatch.setattr(client_mod, "BACKOFF_BASE_S", 0.01)
        monkeypatch.setattr(client_mod, "BACKOFF_CAP_S", 0.02)
        scripted = ScriptedServer()
        scripted.advertise_failures = 3
        report = self.run_one(scripted, max_rounds=1)
        # three failed advertise polls, then a full (dissolved) round attempt
        assert scripted.calls.count("/v1/advertise") == 4
        assert report.attempted == 1

    def test_group_dissolved_abandons_gracefully(self):
        scripted = ScriptedServer()
        report = self.run_one(scripted, max_rounds=1)
        assert report.abandoned == 1
        assert report.failed == 0

    def test_late_rejection_reported(self):
        scripted = ScriptedServer()

        def ok_config(request):
            return httpx.Response(
                200,
                json={
                    "task_id": "t-1", "round": 1, "mode": "sync", "model_version": 0,
                    "model_length": 2, "secagg": False,
                    "dp": {"mode": "off", "clip_norm": 1.0, "noise_multiplier": 0.0},
                    "evaluate": False, "participant_index": 0, "deadline_s": 30.0,
                    "vg": {"group_id": 0, "size": 1, "roster": [{"index": 0, "client_id": "c000", "public_key_b64": None}]},
                },
            )

        scripted.config_response = ok_config
        report = self.run_one(scripted, max_rounds=1)
        assert report.abandoned == 1  # upload answered with code "late"

    def test_local_deadline_skips_upload(self):
        scripted = ScriptedServer()

        def tight_config(request):
            return httpx.Response(
                200,
                json={
                    "task_id": "t-1", "round": 1, "mode": "sync", "model_version": 0,
                    "model_length": 2, "secagg": False,
                    "dp": {"mode": "off", "clip_norm": 1.0, "noise_multiplier": 0.0},
                    "evaluate": False, "participant_index": 0, "deadline_s": 1e-9,
                    "vg": {"group_id": 0, "size": 1, "roster": [{"index": 0, "client_id": "c000", "public_key_b64": None}]},
                },
            )

        scripted.config_response = tight_config
        report = self.run_one(scripted, max_rounds=1)
        assert report.abandoned == 1
        assert not any(p.endswith("/update") for p in scripted.calls)


class TestFedProx:
    def test_identical_weights_zero(self):
        value, grad = fedprox_penalty(np.ones(4), np.ones(4), mu_prox=0.7)
        assert value == 0.0
        assert np.array_equal(grad, np.zeros(4))

    def test_zero_mu_zero(self):
        value, grad = fedprox_penalty(np.array([1.0, 2.0]), np.array([0.0, 0.0]), 0.0)
        assert value == 0.0
        assert np.array_equal(grad, np.zeros(2))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal(6)
        wg = rng.standard_normal(6)
        mu = 0.37
        _, grad = fedprox_penalty(w, wg, mu)
        h = 1e-6
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            num = (fedprox_penalty(w + e, wg, mu)[0] - fedprox_penalty(w - e, wg, mu)[0]) / (2 * h)
            assert num == pytest.approx(grad[j], rel=1e-6, abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(Exception, match="length"):
            fedprox_penalty(np.ones(3), np.ones(4), 1.0)


class TestLogisticTrainer:
    def test_learns_on_separable_data(self):
        rng = np.random.default_rng(0)
        n, d = 400, 5
        X = rng.standard_normal((n, d))
        w_true = rng.standard_normal(d)
        y = (X @ w_true > 0).astype(float)
        shards = [np.arange(n)]
        trainer = LogisticTrainer(X, y, shards, client_index=0, base_seed=1, subsample=1.0, epochs=10)
        model_bytes = codec.encode_payload(np.zeros(d + 1))
        delta, metrics = trainer(model_bytes, round_id=1)
        w = np.zeros(d + 1) + delta
        _, acc = trainers.logistic_loss_and_accuracy(w, X, y)
        assert acc > 0.9
        assert metrics["weight"] == 400.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((100, 3))
        y = (X[:, 0] > 0).astype(float)
        shards = [np.arange(50), np.arange(50, 100)]
        model_bytes = codec.encode_payload(np.zeros(4))
        t1 = LogisticTrainer(X, y, shards, client_index=2, base_seed=9)
        t2 = LogisticTrainer(X, y, shards, client_index=2, base_seed=9)
        d1, _ = t1(model_bytes, 3)
        d2, _ = t2(model_bytes, 3)
        assert np.array_equal(d1, d2)
