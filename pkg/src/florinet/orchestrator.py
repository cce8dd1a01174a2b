"""Task orchestration: lifecycle, cohort selection, round phases, aggregation.

One Orchestrator owns a registry of tasks.  All mutating calls must be
serialized by the caller (the HTTP layer runs them on a single event loop;
tests call them single-threaded): the class itself takes no locks.  Time is
injected through a ``clock`` callable so deadline behaviour is testable.

Sync tasks run a four-phase round machine::

    Selecting -> KeyExchange (secagg only) -> Collecting -> Aggregating

Registration is a resolution protocol: a client enters the candidate pool and
its outcome (ticket / rejection) materializes when the cohort is drawn, which
happens as soon as the pool reaches ``ceil(over_provision * clients_per_round)``
or at the registration deadline if at least ``clients_per_round`` candidates
arrived.  Async tasks skip phases entirely: registration stays open while the
task runs, every submission lands in a buffer, and each K-th update triggers a
flush (one model version).

Round failures (registration shortfall, every group dissolved, no
contributions) are retried up to ``retry_limit`` times before the task fails;
aggregation execution failures fail the task immediately with the diagnostic.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import math
import secrets
import time
import random
from dataclasses import dataclass, field

import numpy as np

from . import aggregation as agg
from . import codec
from .aggregation import Discarded, InterimResult, VGAccumulator
from .attestation import AcceptAllVerifier, AttestationVerifier
from .errors import ProtocolError, SpecError, StoreError
from .privacy import AccountantState, epsilon as accountant_epsilon
from .store import MemoryTaskStore, canonical_json
from .taskspec import ClientInfo, TaskSpec, criteria_match

LIFECYCLES = ("created", "running", "paused", "completed", "cancelled", "failed")
TERMINAL = ("completed", "cancelled", "failed")
PHASES = ("selecting", "key_exchange", "collecting", "aggregating")

# lifecycle graph; anything absent is an illegal transition
LEGAL_TRANSITIONS = {
    ("created", "running"),
    ("running", "paused"),
    ("paused", "running"),
    ("running", "completed"),
    ("running", "cancelled"),
    ("running", "failed"),
    ("paused", "cancelled"),
}

TICKET_GRACE_S = 120.0


def fisher_yates_sample(pool: list, k: int, rng: random.Random) -> list:
    """First k entries of a Fisher-Yates shuffle: uniform sample without replacement."""
    items = list(pool)
    n = len(items)
    if k > n:
        raise ProtocolError("sample larger than pool")
    for i in range(k):
        j = rng.randrange(i, n)
        items[i], items[j] = items[j], items[i]
    return items[:k]


@dataclass
class Ticket:
    token: str
    task_id: str
    round_id: int
    vg_id: int | None
    participant_index: int
    expires_at: float

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "task_id": self.task_id,
            "round": self.round_id,
            "vg_id": self.vg_id,
            "participant_index": self.participant_index,
            "expires_at": self.expires_at,
        }


@dataclass
class Rejected:
    reason: str


@dataclass
class Pending:
    registration_id: str


@dataclass
class _Registration:
    reg_id: str
    client: ClientInfo
    public_key: bytes | None
    outcome: Ticket | Rejected | None = None


@dataclass
class _Participant:
    client_id: str
    public_key: bytes | None
    vg_id: int | None
    index: int  # dense within the virtual group
    token: str
    confirmed: bool = False
    submitted: bool = False
    metrics: dict = field(default_factory=dict)


@dataclass
class _TicketRecord:
    task_id: str
    round_id: int
    attempt: int
    vg_id: int | None
    index: int
    client_id: str
    expires_at: float
    used: bool = False


@dataclass
class _VirtualGroup:
    vg_id: int
    members: list  # participant tokens in roster order
    accumulator: VGAccumulator
    dissolved: bool = False
    reason: str = ""


class _TaskRuntime:
    def __init__(self, task_id: str, spec: TaskSpec, model: np.ndarray, clock):
        self.task_id = task_id
        self.spec = spec
        self.lifecycle = "created"
        self.failure_reason = ""
        self.created_at = clock()
        self.model = model
        self.model_version = 0
        self.current_round = 0
        self.attempt = 0
        self.round_failures = 0
        self.phase = "selecting"
        self.phase_deadline: float | None = None
        self.round_started_at: float | None = None
        seed = spec.seed if spec.seed is not None else secrets.randbits(63)
        self.rng = random.Random(seed)
        self.np_rng = np.random.default_rng(seed)
        self.pool: list[_Registration] = []
        self.pool_by_client: dict[str, _Registration] = {}
        self.participants: dict[str, _Participant] = {}
        self.vgs: dict[int, _VirtualGroup] = {}
        self.clients_selected = 0
        self.async_buffer: list[tuple[np.ndarray, int, dict]] = []
        self.async_counter = 0
        self.last_flush_at: float | None = None
        self.metrics: list[dict] = []
        self.paused_at: float | None = None
        self.accountant: AccountantState | None = None
        if spec.dp.mode != "off":
            cohort = spec.async_buffer_size if spec.mode == "async" else spec.clients_per_round
            self.accountant = AccountantState(
                sampling_rate=spec.dp.sampling_rate(cohort),
                sigma=spec.dp.noise_multiplier,
                delta=spec.dp.delta,
            )

    @property
    def pool_cap(self) -> int:
        return math.ceil(self.spec.over_provision * self.spec.clients_per_round)

    def state_dict(self) -> dict:
        d = {
            "task_id": self.task_id,
            "lifecycle": self.lifecycle,
            "failure_reason": self.failure_reason,
            "created_at": self.created_at,
            "current_round": self.current_round,
            "model_version": self.model_version,
            "accountant": self.accountant.to_dict() if self.accountant else None,
        }
        return d


class Orchestrator:
    """Registry plus control loop body for every task on this server."""

    def __init__(
        self,
        store=None,
        *,
        verifier: AttestationVerifier | None = None,
        clock=time.time,
        ticket_key: bytes | None = None,
        id_factory=None,
        on_progress=None,
    ):
        self.store = store if store is not None else MemoryTaskStore()
        self.verifier = verifier if verifier is not None else AcceptAllVerifier()
        self.clock = clock
        self._ticket_key = ticket_key or secrets.token_bytes(32)
        self._id_factory = id_factory or (lambda: "t-" + secrets.token_hex(6))
        # called with a task id whenever parked registrations resolve; the
        # HTTP layer uses it to wake long-poll waiters without busy polling
        self._on_progress = on_progress
        self._tasks: dict[str, _TaskRuntime] = {}
        self._tickets: dict[str, _TicketRecord] = {}
        self._registrations: dict[str, _Registration] = {}

    def set_progress_hook(self, hook) -> None:
        self._on_progress = hook

    def _notify(self, task_id: str) -> None:
        if self._on_progress is not None:
            self._on_progress(task_id)

    # ------------------------------------------------------------------ admin

    def create_task(self, spec: TaskSpec | dict, initial_model: bytes) -> str:
        if isinstance(spec, dict):
            spec = TaskSpec.from_dict(spec)
        else:
            spec.validate()
        decoded = codec.decode_payload(initial_model)
        if not isinstance(decoded, np.ndarray):
            raise SpecError("initial model must be a float payload")
        for rt in self._tasks.values():
            s = rt.spec
            if (s.app_name, s.workflow_name, s.task_name) == (
                spec.app_name,
                spec.workflow_name,
                spec.task_name,
            ):
                raise SpecError(
                    "duplicate (app_name, workflow_name, task_name)", code="duplicate"
                )
        task_id = self._id_factory()
        rt = _TaskRuntime(task_id, spec, decoded, self.clock)
        self._tasks[task_id] = rt
        self.store.put_json(task_id, "spec.json", spec.to_dict())
        self.store.put_blob(task_id, "models/v0.bin", codec.encode_payload(decoded))
        self._persist_state(rt)
        return task_id

    def list_tasks(self) -> list[dict]:
        return [self._summary(rt) for rt in self._tasks.values()]

    def get_task(self, task_id: str) -> dict:
        rt = self._get(task_id)
        d = self._summary(rt)
        d.update(
            {
                "spec": rt.spec.to_dict(),
                "phase": rt.phase if rt.spec.mode == "sync" else "collecting",
                "failure_reason": rt.failure_reason,
                "created_at": rt.created_at,
                "round_failures": rt.round_failures,
            }
        )
        if rt.accountant is not None:
            d["privacy"] = self._privacy_report(rt)
        return d

    def control(self, task_id: str, action: str) -> str:
        rt = self._get(task_id)
        now = self.clock()
        targets = {"pause": "paused", "resume": "running", "cancel": "cancelled"}
        if action not in targets:
            raise ProtocolError(f"unknown action {action!r}", code="bad_action")
        target = targets[action]
        if (rt.lifecycle, target) not in LEGAL_TRANSITIONS:
            code = "terminal" if rt.lifecycle in TERMINAL else "illegal_transition"
            raise ProtocolError(
                f"cannot {action} a task in lifecycle {rt.lifecycle!r}", code=code
            )
        if action == "pause":
            rt.paused_at = now
        elif action == "resume":
            shift = now - (rt.paused_at or now)
            rt.paused_at = None
            if rt.phase_deadline is not None:
                rt.phase_deadline += shift
            if rt.last_flush_at is not None:
                rt.last_flush_at += shift
            for token in rt.participants:
                rec = self._tickets.get(token)
                if rec is not None:
                    rec.expires_at += shift
        elif action == "cancel":
            self._resolve_all_pending(rt, Rejected("round full"))
        rt.lifecycle = target
        self._persist_state(rt)
        if (
            action == "resume"
            and rt.spec.mode == "async"
            and len(rt.async_buffer) >= rt.spec.async_buffer_size
        ):
            self._async_flush(rt, now)
        return rt.lifecycle

    def get_metrics(self, task_id: str) -> dict:
        rt = self._get(task_id)
        out = {"task_id": task_id, "rounds": list(rt.metrics)}
        if rt.accountant is not None:
            out["privacy"] = self._privacy_report(rt)
        return out

    def get_privacy(self, task_id: str) -> dict:
        rt = self._get(task_id)
        if rt.accountant is None:
            raise ProtocolError("differential privacy is off for this task", code="dp_disabled")
        return self._privacy_report(rt)

    def get_model(self, task_id: str, version: int) -> bytes:
        rt = self._get(task_id)
        if not 0 <= version <= rt.model_version:
            raise ProtocolError(f"no model version {version}", code="not_found")
        return self.store.get_blob(task_id, f"models/v{version}.bin")

    # ----------------------------------------------------------------- client

    def advertise(self, client: ClientInfo) -> list[dict]:
        offers = []
        for rt in self._tasks.values():
            if rt.lifecycle != "running":
                continue
            s = rt.spec
            if (client.app_name, client.workflow_name) != (s.app_name, s.workflow_name):
                continue
            if not criteria_match(s.selection_criteria, client.metadata):
                continue
            if s.mode == "sync":
                if rt.phase != "selecting" or len(rt.pool) >= rt.pool_cap:
                    continue
            offers.append({"task_id": rt.task_id, "round": self._display_round(rt)})
        return offers

    def register(
        self, task_id: str, client: ClientInfo, public_key: bytes | None
    ) -> Ticket | Pending | Rejected:
        rt = self._get(task_id)
        now = self.clock()
        if rt.lifecycle != "running":
            return Rejected("round full")
        s = rt.spec
        if (client.app_name, client.workflow_name) != (s.app_name, s.workflow_name):
            return Rejected("criteria")
        if not criteria_match(s.selection_criteria, client.metadata):
            return Rejected("criteria")
        if not self.verifier.verify(client):
            return Rejected("attestation")

        if s.mode == "async":
            return self._register_async(rt, client, now)

        if rt.phase != "selecting":
            return Rejected("round full")
        if s.secagg_enabled and not public_key:
            return Rejected("secagg requires a public key")
        existing = rt.pool_by_client.get(client.client_id)
        if existing is not None:
            return existing.outcome if existing.outcome is not None else Pending(existing.reg_id)
        if len(rt.pool) >= rt.pool_cap:
            return Rejected("round full")
        reg = _Registration(reg_id=secrets.token_hex(8), client=client, public_key=public_key)
        rt.pool.append(reg)
        rt.pool_by_client[client.client_id] = reg
        self._registrations[reg.reg_id] = reg
        if len(rt.pool) >= rt.pool_cap:
            self._run_selection(rt, now)
        return reg.outcome if reg.outcome is not None else Pending(reg.reg_id)

    def poll_registration(self, task_id: str, reg_id: str) -> Ticket | Pending | Rejected:
        reg = self._registrations.get(reg_id)
        if reg is None:
            raise ProtocolError("unknown registration", code="not_found")
        return reg.outcome if reg.outcome is not None else Pending(reg_id)

    def round_config(self, task_id: str, token: str) -> dict:
        rt = self._get(task_id)
        rec = self._check_ticket(rt, token)
        s = rt.spec
        config = {
            "task_id": task_id,
            "round": rec.round_id,
            "mode": s.mode,
            "model_version": rt.model_version,
            "model_length": int(rt.model.size),
            "secagg": s.secagg_enabled,
            "dp": {
                "mode": s.dp.mode,
                "clip_norm": s.dp.clip_norm,
                "noise_multiplier": s.dp.noise_multiplier,
            },
            "evaluate": self._display_round(rt) % s.eval_interval == 0,
            "participant_index": rec.index,
        }
        if s.mode == "async":
            config["deadline_s"] = s.timeouts.upload_s
            return config

        participant = rt.participants.get(token)
        if participant is None:
            raise ProtocolError("ticket is not part of the current attempt", code="regroup")
        vg = rt.vgs[participant.vg_id]
        if vg.dissolved:
            raise ProtocolError("group dissolved", code="regroup")
        if not participant.confirmed:
            participant.confirmed = True
            self._maybe_finish_key_exchange(rt)
        config["vg"] = {
            "group_id": vg.vg_id,
            "size": vg.accumulator.roster_size,
            "roster": [
                {
                    "index": rt.participants[t].index,
                    "client_id": rt.participants[t].client_id,
                    "public_key_b64": base64.b64encode(rt.participants[t].public_key).decode()
                    if rt.participants[t].public_key
                    else None,
                }
                for t in vg.members
            ],
        }
        if s.secagg_enabled:
            config["quant"] = s.quant_params().to_dict()
        remaining = (rt.phase_deadline or self.clock()) - self.clock()
        config["deadline_s"] = max(0.0, remaining)
        return config

    def submit_update(self, task_id: str, token: str, payload: bytes, metrics: dict) -> dict:
        rt = self._get(task_id)
        now = self.clock()
        rec = self._check_ticket(rt, token)
        s = rt.spec

        if s.mode == "async":
            decoded = codec.decode_payload(payload)
            if not isinstance(decoded, np.ndarray):
                raise ProtocolError("async tasks expect float payloads", code="codec")
            if decoded.size != rt.model.size:
                raise ProtocolError("payload length mismatch", code="codec")
            rec.used = True
            rt.async_buffer.append((decoded, rec.round_id, dict(metrics)))
            if len(rt.async_buffer) >= s.async_buffer_size and rt.lifecycle == "running":
                self._async_flush(rt, now)
            return {"accepted": True}

        participant = rt.participants.get(token)
        if participant is None or rec.round_id != rt.current_round or rec.attempt != rt.attempt:
            raise ProtocolError("round is over", code="late")
        if rt.phase not in ("key_exchange", "collecting"):
            raise ProtocolError("round is over", code="late")
        if rt.phase == "collecting" and rt.phase_deadline is not None and now > rt.phase_deadline:
            raise ProtocolError("past upload deadline", code="late")
        vg = rt.vgs[participant.vg_id]
        if vg.dissolved:
            raise ProtocolError("group dissolved", code="regroup")

        decoded = codec.decode_payload(payload)
        if s.secagg_enabled:
            if not isinstance(decoded, codec.QuantizedVector):
                raise ProtocolError("secagg tasks expect quantized payloads", code="codec")
        else:
            if not isinstance(decoded, np.ndarray):
                raise ProtocolError("plaintext tasks expect float payloads", code="codec")
        try:
            weight = float(metrics.get("weight", 1.0))
            vg.accumulator.accumulate(participant.index, decoded, weight=weight)
        except Exception as exc:
            code = getattr(exc, "code", "protocol")
            raise ProtocolError(str(exc), code=code) from exc
        rec.used = True
        participant.submitted = True
        participant.metrics = dict(metrics)
        if all(g.dissolved or g.accumulator.complete for g in rt.vgs.values()):
            self._finish_collecting(rt, now)
        return {"accepted": True}

    def status(self, task_id: str, token: str) -> dict:
        rt = self._get(task_id)
        rec = self._check_ticket(rt, token, allow_used=True)
        instruction = "proceed"
        if rt.lifecycle in TERMINAL:
            instruction = "abort"
        elif rt.spec.mode == "sync" and rec.round_id == rt.current_round:
            if rec.attempt != rt.attempt:
                # the attempt this ticket belonged to was abandoned and retried
                instruction = "regroup"
            else:
                participant = rt.participants.get(token)
                if participant is not None:
                    vg = rt.vgs.get(participant.vg_id)
                    if vg is not None and vg.dissolved:
                        instruction = "regroup"
        return {
            "phase": rt.phase if rt.spec.mode == "sync" else "collecting",
            "round": self._display_round(rt),
            "lifecycle": rt.lifecycle,
            "instruction": instruction,
        }

    # ------------------------------------------------------------------- time

    def tick(self, task_id: str | None = None) -> None:
        now = self.clock()
        tasks = [self._get(task_id)] if task_id else list(self._tasks.values())
        for rt in tasks:
            self._tick_task(rt, now)

    def _tick_task(self, rt: _TaskRuntime, now: float) -> None:
        if rt.lifecycle == "created":
            rt.lifecycle = "running"
            self._begin_round(rt, now, next_round=True)
            self._persist_state(rt)
            return
        if rt.lifecycle != "running" or rt.spec.mode == "async":
            return
        if rt.phase_deadline is None or now < rt.phase_deadline:
            return
        if rt.phase == "selecting":
            if len(rt.pool) >= rt.spec.clients_per_round:
                self._run_selection(rt, now)
            else:
                self._attempt_failed(rt, now, "registration shortfall")
        elif rt.phase == "key_exchange":
            self._key_exchange_deadline(rt, now)
        elif rt.phase == "collecting":
            self._finish_collecting(rt, now)

    # ------------------------------------------------------------ persistence

    def snapshot(self, task_id: str) -> bytes:
        rt = self._get(task_id)
        self._persist_state(rt)
        raw = self.store.get_raw(task_id, "state.json")
        return raw if raw is not None else canonical_json(rt.state_dict())

    def restore(self) -> list[str]:
        """Load every task found in the store; corrupt tasks come back failed."""
        loaded = []
        for task_id in self.store.list_tasks():
            if task_id in self._tasks:
                continue
            try:
                spec_doc = self.store.get_json(task_id, "spec.json")
                state = self.store.get_json(task_id, "state.json")
                if spec_doc is None or state is None:
                    raise StoreError("missing spec.json or state.json")
                spec = TaskSpec.from_dict(spec_doc)
                version = int(state["model_version"])
                model = codec.decode_payload(self.store.get_blob(task_id, f"models/v{version}.bin"))
                if not isinstance(model, np.ndarray):
                    raise StoreError("model blob is not a float payload")
                rt = _TaskRuntime(task_id, spec, model, self.clock)
                rt.lifecycle = state["lifecycle"]
                rt.failure_reason = state.get("failure_reason", "")
                rt.created_at = state.get("created_at", self.clock())
                rt.model_version = version
                rt.current_round = int(state["current_round"])
                if state.get("accountant") and rt.accountant is not None:
                    rt.accountant = AccountantState.from_dict(state["accountant"])
                rt.metrics = self.store.read_jsonl(task_id, "metrics.jsonl")
                if rt.spec.mode == "async":
                    rt.async_counter = 0
                    rt.last_flush_at = None
                if rt.lifecycle == "running":
                    # in-flight round state is deliberately not persisted:
                    # the interrupted round restarts from client selection
                    self._begin_round(rt, self.clock(), next_round=False)
                self._tasks[task_id] = rt
                loaded.append(task_id)
            except Exception as exc:
                rt = self._tasks.get(task_id)
                placeholder = _TaskRuntime(
                    task_id,
                    TaskSpec(
                        task_name=f"unrecoverable-{task_id}",
                        app_name="unknown",
                        workflow_name="unknown",
                        clients_per_round=1,
                        total_rounds=1,
                    ),
                    np.zeros(1),
                    self.clock,
                )
                placeholder.lifecycle = "failed"
                placeholder.failure_reason = f"restore failed: {exc}"
                self._tasks[task_id] = placeholder
                loaded.append(task_id)
        return loaded

    # -------------------------------------------------------------- internals

    def _get(self, task_id: str) -> _TaskRuntime:
        rt = self._tasks.get(task_id)
        if rt is None:
            raise ProtocolError(f"unknown task {task_id}", code="not_found")
        return rt

    def _display_round(self, rt: _TaskRuntime) -> int:
        if rt.spec.mode == "async":
            return rt.model_version
        return rt.current_round

    def _summary(self, rt: _TaskRuntime) -> dict:
        reported = sum(1 for p in rt.participants.values() if p.submitted)
        if rt.spec.mode == "async":
            connected = len(rt.async_buffer)
        else:
            connected = len(rt.participants) or len(rt.pool)
        return {
            "task_id": rt.task_id,
            "task_name": rt.spec.task_name,
            "app_name": rt.spec.app_name,
            "workflow_name": rt.spec.workflow_name,
            "mode": rt.spec.mode,
            "lifecycle": rt.lifecycle,
            "round": self._display_round(rt),
            "total_rounds": rt.spec.total_rounds,
            "model_version": rt.model_version,
            "clients_connected": connected,
            "clients_reported": reported,
        }

    def _privacy_report(self, rt: _TaskRuntime) -> dict:
        eps, alpha = accountant_epsilon(rt.accountant)
        return {
            "epsilon": eps,
            "delta": rt.accountant.delta,
            "alpha": alpha,
            "steps": rt.accountant.steps,
            "sampling_rate": rt.accountant.sampling_rate,
            "noise_multiplier": rt.accountant.sigma,
        }

    def _persist_state(self, rt: _TaskRuntime) -> None:
        self.store.put_json(rt.task_id, "state.json", rt.state_dict())

    def _mint_ticket(
        self, rt: _TaskRuntime, client_id: str, vg_id: int | None, index: int, expires_at: float
    ) -> str:
        round_id = rt.current_round if rt.spec.mode == "sync" else rt.model_version
        # (round, attempt, vg, index, client) is unique per mint, so the token
        # is deterministic given the ticket key; opacity comes from the MAC
        body = f"{rt.task_id}|{round_id}|{rt.attempt}|{-1 if vg_id is None else vg_id}|{index}|{client_id}"
        mac = hmac.new(self._ticket_key, body.encode(), hashlib.sha256).hexdigest()[:32]
        token = base64.urlsafe_b64encode(body.encode()).decode().rstrip("=") + "." + mac
        self._tickets[token] = _TicketRecord(
            task_id=rt.task_id,
            round_id=round_id,
            attempt=rt.attempt,
            vg_id=vg_id,
            index=index,
            client_id=client_id,
            expires_at=expires_at,
        )
        return token

    def _check_ticket(self, rt: _TaskRuntime, token: str, allow_used: bool = False) -> _TicketRecord:
        if not token or "." not in token:
            raise ProtocolError("malformed ticket", code="bad_ticket")
        body_b64, mac = token.rsplit(".", 1)
        try:
            pad = "=" * (-len(body_b64) % 4)
            body = base64.urlsafe_b64decode(body_b64 + pad)
        except Exception as exc:
            raise ProtocolError("malformed ticket", code="bad_ticket") from exc
        expect = hmac.new(self._ticket_key, body, hashlib.sha256).hexdigest()[:32]
        if not hmac.compare_digest(mac, expect):
            raise ProtocolError("ticket signature mismatch", code="bad_ticket")
        rec = self._tickets.get(token)
        if rec is None or rec.task_id != rt.task_id:
            raise ProtocolError("unknown ticket", code="bad_ticket")
        if self.clock() > rec.expires_at:
            raise ProtocolError("ticket expired", code="expired_ticket")
        if rec.used and not allow_used:
            raise ProtocolError("ticket already used for submission", code="duplicate")
        return rec

    def _register_async(self, rt: _TaskRuntime, client: ClientInfo, now: float) -> Ticket:
        index = rt.async_counter
        rt.async_counter += 1
        expires = now + rt.spec.timeouts.upload_s + TICKET_GRACE_S
        token = self._mint_ticket(rt, client.client_id, None, index, expires)
        return Ticket(
            token=token,
            task_id=rt.task_id,
            round_id=rt.model_version,
            vg_id=None,
            participant_index=index,
            expires_at=expires,
        )

    def _begin_round(self, rt: _TaskRuntime, now: float, next_round: bool) -> None:
        if rt.spec.mode == "async":
            rt.phase = "collecting"
            rt.phase_deadline = None
            if rt.last_flush_at is None:
                rt.last_flush_at = now
            return
        if next_round:
            rt.current_round += 1
            rt.round_failures = 0
        rt.attempt += 1
        rt.phase = "selecting"
        rt.phase_deadline = now + rt.spec.timeouts.registration_s
        rt.round_started_at = now
        rt.pool = []
        rt.pool_by_client = {}
        rt.participants = {}
        rt.vgs = {}
        rt.clients_selected = 0

    def _run_selection(self, rt: _TaskRuntime, now: float) -> None:
        s = rt.spec
        cohort = fisher_yates_sample(rt.pool, s.clients_per_round, rt.rng)
        selected = set(id(r) for r in cohort)

        if s.secagg_enabled:
            group_sizes = []
            remaining = len(cohort)
            while remaining > 0:
                take = min(s.vg_size, remaining)
                group_sizes.append(take)
                remaining -= take
            if group_sizes and group_sizes[-1] == 1:
                # a singleton cannot run pairwise masking; return it to the pool
                dropped = cohort.pop()
                selected.discard(id(dropped))
                group_sizes.pop()
        else:
            group_sizes = [len(cohort)]

        expires = now + s.timeouts.key_exchange_s + s.timeouts.upload_s + TICKET_GRACE_S
        cursor = 0
        for vg_id, size in enumerate(group_sizes):
            members = []
            acc = VGAccumulator(
                group_id=vg_id,
                roster_size=size,
                length=int(rt.model.size),
                secure=s.secagg_enabled,
                params=s.quant_params() if s.secagg_enabled else None,
            )
            for index in range(size):
                reg = cohort[cursor]
                cursor += 1
                token = self._mint_ticket(rt, reg.client.client_id, vg_id, index, expires)
                rt.participants[token] = _Participant(
                    client_id=reg.client.client_id,
                    public_key=reg.public_key,
                    vg_id=vg_id,
                    index=index,
                    token=token,
                )
                members.append(token)
                reg.outcome = Ticket(
                    token=token,
                    task_id=rt.task_id,
                    round_id=rt.current_round,
                    vg_id=vg_id,
                    participant_index=index,
                    expires_at=expires,
                )
            rt.vgs[vg_id] = _VirtualGroup(vg_id=vg_id, members=members, accumulator=acc)

        for reg in rt.pool:
            if id(reg) not in selected and reg.outcome is None:
                reg.outcome = Rejected("round full")
        rt.clients_selected = sum(group_sizes)

        if s.secagg_enabled:
            rt.phase = "key_exchange"
            rt.phase_deadline = now + s.timeouts.key_exchange_s
        else:
            rt.phase = "collecting"
            rt.phase_deadline = now + s.timeouts.upload_s
        self._notify(rt.task_id)

    def _maybe_finish_key_exchange(self, rt: _TaskRuntime) -> None:
        if rt.phase != "key_exchange":
            return
        for vg in rt.vgs.values():
            if vg.dissolved:
                continue
            if not all(rt.participants[t].confirmed for t in vg.members):
                return
        rt.phase = "collecting"
        rt.phase_deadline = self.clock() + rt.spec.timeouts.upload_s

    def _key_exchange_deadline(self, rt: _TaskRuntime, now: float) -> None:
        survivors = 0
        for vg in rt.vgs.values():
            if vg.dissolved:
                continue
            if all(rt.participants[t].confirmed for t in vg.members):
                survivors += 1
            else:
                vg.dissolved = True
                vg.reason = "key exchange timeout"
        if survivors == 0:
            self._attempt_failed(rt, now, "all groups dissolved in key exchange")
        else:
            rt.phase = "collecting"
            rt.phase_deadline = now + rt.spec.timeouts.upload_s

    def _finish_collecting(self, rt: _TaskRuntime, now: float) -> None:
        rt.phase = "aggregating"
        rt.phase_deadline = None
        interims: list[InterimResult] = []
        for vg in rt.vgs.values():
            if vg.dissolved:
                continue
            result = vg.accumulator.finalize()
            if isinstance(result, Discarded):
                vg.dissolved = True
                vg.reason = result.reason
            else:
                interims.append(result)
        if not interims:
            self._attempt_failed(rt, now, "no contributions")
            return

        s = rt.spec
        try:
            if s.dp.mode == "global" and s.strategy.kind in ("mean", "weighted_mean"):
                total, count, weight = agg.combine_interims(interims)
                denom = count if s.strategy.kind == "mean" else weight
                delta = agg.apply_global_dp(total, denom, s.dp, rt.np_rng)
                new_model = rt.model + delta
            else:
                new_model = agg.master_aggregate(interims, s.strategy, rt.model)
        except Exception as exc:
            self._task_failed(rt, f"aggregation failed in round {rt.current_round}: {exc}")
            return

        rt.model = codec.as_model_vector(new_model)
        rt.model_version += 1
        if rt.accountant is not None:
            rt.accountant.step()
        self.store.put_blob(rt.task_id, f"models/v{rt.model_version}.bin", codec.encode_payload(rt.model))
        self._record_round_metrics(rt, now, failed=False, reason="")
        if rt.current_round >= s.total_rounds:
            rt.lifecycle = "completed"
            rt.phase = "selecting"
            self._resolve_all_pending(rt, Rejected("round full"))
        else:
            self._begin_round(rt, now, next_round=True)
        self._persist_state(rt)

    def _async_flush(self, rt: _TaskRuntime, now: float) -> None:
        s = rt.spec
        k = s.async_buffer_size
        batch, rt.async_buffer = rt.async_buffer[:k], rt.async_buffer[k:]
        weights = []
        for _, trained_version, _ in batch:
            staleness = max(0, rt.model_version - trained_version)
            weights.append(1.0 / (1.0 + staleness) if s.async_staleness_discount else 1.0)
        total = np.zeros(int(rt.model.size))
        for (delta, _, _), w in zip(batch, weights):
            total += w * delta
        weight_sum = float(sum(weights))
        try:
            if s.dp.mode == "global":
                mean_delta = agg.apply_global_dp(total, weight_sum, s.dp, rt.np_rng)
            else:
                mean_delta = total / weight_sum
        except Exception as exc:
            self._task_failed(rt, f"aggregation failed at flush {rt.model_version + 1}: {exc}")
            return
        rt.model = codec.as_model_vector(rt.model + mean_delta)
        rt.model_version += 1
        if rt.accountant is not None:
            rt.accountant.step()
        self.store.put_blob(rt.task_id, f"models/v{rt.model_version}.bin", codec.encode_payload(rt.model))

        losses = [m.get("loss") for _, _, m in batch if isinstance(m.get("loss"), (int, float))]
        entry = {
            "round": rt.model_version,
            "failed": False,
            "reason": "",
            "started_at": rt.last_flush_at,
            "ended_at": now,
            "duration_s": max(0.0, now - (rt.last_flush_at or now)),
            "clients_selected": len(batch),
            "clients_reported": len(batch),
            "clients_dropped": 0,
            "mean_loss": float(np.mean(losses)) if losses else None,
            "mean_eval": self._mean_eval([m for _, _, m in batch]),
            "model_version": rt.model_version,
        }
        rt.metrics.append(entry)
        self.store.append_jsonl(rt.task_id, "metrics.jsonl", entry)
        rt.last_flush_at = now
        if rt.model_version >= s.total_rounds:
            rt.lifecycle = "completed"
        self._persist_state(rt)

    def _mean_eval(self, metrics_list: list[dict]) -> dict:
        sums: dict[str, list[float]] = {}
        for m in metrics_list:
            ev = m.get("eval")
            if isinstance(ev, dict):
                for key, val in ev.items():
                    if isinstance(val, (int, float)):
                        sums.setdefault(key, []).append(float(val))
        return {k: float(np.mean(v)) for k, v in sorted(sums.items())}

    def _record_round_metrics(self, rt: _TaskRuntime, now: float, failed: bool, reason: str) -> None:
        reported = [p for p in rt.participants.values() if p.submitted]
        losses = [
            p.metrics.get("loss")
            for p in reported
            if isinstance(p.metrics.get("loss"), (int, float))
        ]
        entry = {
            "round": rt.current_round,
            "failed": failed,
            "reason": reason,
            "started_at": rt.round_started_at,
            "ended_at": now,
            "duration_s": max(0.0, now - (rt.round_started_at or now)),
            "clients_selected": rt.clients_selected,
            "clients_reported": len(reported),
            "clients_dropped": max(0, rt.clients_selected - len(reported)),
            "mean_loss": float(np.mean(losses)) if losses else None,
            "mean_eval": self._mean_eval([p.metrics for p in reported]),
            "model_version": rt.model_version,
        }
        rt.metrics.append(entry)
        self.store.append_jsonl(rt.task_id, "metrics.jsonl", entry)

    def _attempt_failed(self, rt: _TaskRuntime, now: float, reason: str) -> None:
        rt.round_failures += 1
        self._record_round_metrics(rt, now, failed=True, reason=reason)
        self._resolve_all_pending(rt, Rejected("round full"))
        if rt.round_failures > rt.spec.retry_limit:
            self._task_failed(
                rt, f"round {rt.current_round} failed after {rt.spec.retry_limit} retries: {reason}"
            )
            return
        self._begin_round(rt, now, next_round=False)
        self._persist_state(rt)

    def _task_failed(self, rt: _TaskRuntime, reason: str) -> None:
        rt.lifecycle = "failed"
        rt.failure_reason = reason
        rt.phase_deadline = None
        self._resolve_all_pending(rt, Rejected("round full"))
        self._persist_state(rt)

    def _resolve_all_pending(self, rt: _TaskRuntime, outcome: Rejected) -> None:
        for reg in rt.pool:
            if reg.outcome is None:
                reg.outcome = outcome
        self._notify(rt.task_id)
