"""Shared test fixtures and protocol-driving helpers."""

import base64

import numpy as np
import pytest

from florinet import codec, secagg
from florinet.orchestrator import Orchestrator, Ticket
from florinet.taskspec import ClientInfo, TaskSpec


class FakeClock:
    """Manually advanced time source for deadline tests."""

    def __init__(self, start: float = 1_000_000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> float:
        self.now += seconds
        return self.now


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def orch(clock):
    return Orchestrator(clock=clock, id_factory=_counter_ids())


def _counter_ids():
    counter = iter(range(1, 10_000))
    return lambda: f"t-{next(counter):04d}"


def make_spec(**overrides) -> TaskSpec:
    base = dict(
        task_name="unit",
        app_name="app",
        workflow_name="wf",
        clients_per_round=2,
        total_rounds=1,
        mode="sync",
        over_provision=1.0,
        seed=7,
    )
    base.update(overrides)
    for key in ("dp", "strategy", "timeouts", "quant"):
        value = base.get(key)
        if value is not None and not isinstance(value, dict):
            base[key] = value.to_dict()
    return TaskSpec.from_dict(base)


def client_info(i: int, **overrides) -> ClientInfo:
    base = dict(client_id=f"c{i:03d}", app_name="app", workflow_name="wf")
    base.update(overrides)
    return ClientInfo(**base)


def float_payload(values) -> bytes:
    return codec.encode_payload(np.asarray(values, dtype=np.float64))


def register_all(orch, task_id, n, public_keys=None, start=0):
    """Register n clients; returns their outcomes in order."""
    outcomes = []
    for i in range(start, start + n):
        pk = public_keys[i - start] if public_keys else None
        outcomes.append(orch.register(task_id, client_info(i), pk))
    return outcomes


def run_plain_sync_round(orch, task_id, deltas):
    """Drive one complete plaintext sync round; returns the tickets used."""
    orch.tick()
    outcomes = register_all(orch, task_id, len(deltas))
    tickets = [orch.poll_registration(task_id, o.registration_id) if not isinstance(o, Ticket) else o for o in outcomes]
    assert all(isinstance(t, Ticket) for t in tickets)
    for t in tickets:
        orch.round_config(task_id, t.token)
    for t, d in zip(tickets, deltas):
        orch.submit_update(task_id, t.token, float_payload(d), {"loss": 1.0})
    return tickets


def run_secagg_sync_round(orch, task_id, deltas, params, task_round=None):
    """Drive one complete secagg sync round with real client-side masking."""
    orch.tick()
    n = len(deltas)
    keypairs = [secagg.generate_keypair(bytes([i + 1]) * 32) for i in range(n)]
    outcomes = register_all(orch, task_id, n, public_keys=[kp.public for kp in keypairs])
    tickets = [orch.poll_registration(task_id, o.registration_id) if not isinstance(o, Ticket) else o for o in outcomes]
    assert all(isinstance(t, Ticket) for t in tickets)

    kp_by_client = {f"c{i:03d}": keypairs[i] for i in range(n)}
    configs = [orch.round_config(task_id, t.token) for t in tickets]
    rnd = task_round if task_round is not None else configs[0]["round"]
    for t, cfg, delta in zip(tickets, configs, deltas):
        roster = [
            (entry["index"], base64.b64decode(entry["public_key_b64"]))
            for entry in cfg["vg"]["roster"]
        ]
        own = kp_by_client[_client_of(cfg, t)]
        seeds = secagg.pairwise_seeds(own, t.participant_index, roster, task_id, rnd)
        q = codec.quantize(np.asarray(delta, dtype=np.float64), params)
        masked = secagg.apply_masks(q, t.participant_index, seeds)
        orch.submit_update(task_id, t.token, codec.encode_payload(masked), {"loss": 0.5})
    return tickets


def _client_of(cfg, ticket):
    for entry in cfg["vg"]["roster"]:
        if entry["index"] == ticket.participant_index:
            return entry["client_id"]
    raise AssertionError("own index missing from roster")
