"""Task specification, client descriptors, and selection-criteria matching.

A task spec is submitted as JSON (CLI file upload or dashboard form) and is
the single source of truth for a task's protocol shape: sync cohort rounds or
buffered async, secure aggregation on or off, privacy settings, aggregation
strategy, timeouts.  Validation names every violated invariant so operators
can fix a spec in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .aggregation import AggregationStrategy
from .codec import QuantParams
from .errors import SpecError
from .privacy import DpConfig

MODES = ("sync", "async")

_SPEC_KEYS = {
    "task_name", "app_name", "workflow_name", "clients_per_round", "total_rounds",
    "mode", "async_buffer_size", "vg_size", "secagg_enabled", "dp", "strategy",
    "selection_criteria", "timeouts", "eval_interval", "quant", "seed",
    "over_provision", "retry_limit", "async_staleness_discount",
}


@dataclass(frozen=True)
class Timeouts:
    registration_s: float = 60.0
    key_exchange_s: float = 30.0
    upload_s: float = 300.0

    def to_dict(self) -> dict:
        return {
            "registration_s": self.registration_s,
            "key_exchange_s": self.key_exchange_s,
            "upload_s": self.upload_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Timeouts":
        return cls(
            registration_s=float(d.get("registration_s", 60.0)),
            key_exchange_s=float(d.get("key_exchange_s", 30.0)),
            upload_s=float(d.get("upload_s", 300.0)),
        )


@dataclass(frozen=True)
class QuantConfig:
    """Quantization grid for secure-aggregation payloads (headroom from vg_size)."""

    clip_range: float = 1.0
    bits: int = 16

    def params(self, group_max: int) -> QuantParams:
        return QuantParams(clip_range=self.clip_range, bits=self.bits, group_max=group_max)

    def to_dict(self) -> dict:
        return {"clip_range": self.clip_range, "bits": self.bits}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(clip_range=float(d.get("clip_range", 1.0)), bits=int(d.get("bits", 16)))


@dataclass(frozen=True)
class TaskSpec:
    task_name: str
    app_name: str
    workflow_name: str
    clients_per_round: int
    total_rounds: int
    mode: str = "sync"
    async_buffer_size: int = 32
    vg_size: int = 8
    secagg_enabled: bool = False
    dp: DpConfig = field(default_factory=DpConfig)
    strategy: AggregationStrategy = field(default_factory=AggregationStrategy)
    selection_criteria: dict = field(default_factory=dict)
    timeouts: Timeouts = field(default_factory=Timeouts)
    eval_interval: int = 1
    quant: QuantConfig = field(default_factory=QuantConfig)
    seed: int | None = None
    over_provision: float = 1.2
    retry_limit: int = 3
    async_staleness_discount: bool = False

    def validate(self) -> None:
        """Raise SpecError naming every violated invariant."""
        problems = []
        for name in ("task_name", "app_name", "workflow_name"):
            if not getattr(self, name):
                problems.append(f"{name} must be non-empty")
        if self.clients_per_round < 1:
            problems.append("clients_per_round must be >= 1")
        if self.total_rounds < 1:
            problems.append("total_rounds must be >= 1")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.mode == "async":
            if self.secagg_enabled:
                problems.append("async excludes pairwise secagg")
            if self.async_buffer_size < 1:
                problems.append("async_buffer_size must be >= 1")
        if self.mode == "sync" and self.secagg_enabled:
            if self.vg_size < 2:
                problems.append("vg_size must be >= 2 with secagg")
            if self.vg_size > self.clients_per_round:
                problems.append("vg_size must not exceed clients_per_round")
            try:
                self.quant.params(self.vg_size)
            except Exception as exc:
                problems.append(f"quant invalid: {exc}")
        if self.secagg_enabled and self.strategy.kind == "weighted_mean":
            problems.append("weighted_mean is plaintext-only; secagg uses uniform mean")
        if self.dp.mode == "global" and self.strategy.kind == "external":
            problems.append("global dp is incompatible with an external aggregator")
        if self.eval_interval < 1:
            problems.append("eval_interval must be >= 1")
        if self.over_provision < 1.0:
            problems.append("over_provision must be >= 1.0")
        if self.retry_limit < 0:
            problems.append("retry_limit must be >= 0")
        for name, value in self.timeouts.to_dict().items():
            if value <= 0:
                problems.append(f"timeouts.{name} must be positive")
        if problems:
            raise SpecError("; ".join(problems))

    def quant_params(self) -> QuantParams:
        return self.quant.params(self.vg_size)

    def to_dict(self) -> dict:
        d = {
            "task_name": self.task_name,
            "app_name": self.app_name,
            "workflow_name": self.workflow_name,
            "clients_per_round": self.clients_per_round,
            "total_rounds": self.total_rounds,
            "mode": self.mode,
            "secagg_enabled": self.secagg_enabled,
            "dp": self.dp.to_dict(),
            "strategy": self.strategy.to_dict(),
            "selection_criteria": self.selection_criteria,
            "timeouts": self.timeouts.to_dict(),
            "eval_interval": self.eval_interval,
            "over_provision": self.over_provision,
            "retry_limit": self.retry_limit,
        }
        if self.mode == "async":
            d["async_buffer_size"] = self.async_buffer_size
            d["async_staleness_discount"] = self.async_staleness_discount
        if self.mode == "sync" and self.secagg_enabled:
            d["vg_size"] = self.vg_size
            d["quant"] = self.quant.to_dict()
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - _SPEC_KEYS
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        try:
            spec = cls(
                task_name=str(d.get("task_name", "")),
                app_name=str(d.get("app_name", "")),
                workflow_name=str(d.get("workflow_name", "")),
                clients_per_round=int(d.get("clients_per_round", 0)),
                total_rounds=int(d.get("total_rounds", 0)),
                mode=str(d.get("mode", "sync")),
                async_buffer_size=int(d.get("async_buffer_size", 32)),
                vg_size=int(d.get("vg_size", 8)),
                secagg_enabled=bool(d.get("secagg_enabled", False)),
                dp=DpConfig.from_dict(d.get("dp", {})),
                strategy=AggregationStrategy.from_dict(d.get("strategy", {})),
                selection_criteria=dict(d.get("selection_criteria", {})),
                timeouts=Timeouts.from_dict(d.get("timeouts", {})),
                eval_interval=int(d.get("eval_interval", 1)),
                quant=QuantConfig.from_dict(d.get("quant", {})),
                seed=int(d["seed"]) if d.get("seed") is not None else None,
                over_provision=float(d.get("over_provision", 1.2)),
                retry_limit=int(d.get("retry_limit", 3)),
                async_staleness_discount=bool(d.get("async_staleness_discount", False)),
            )
        except SpecError:
            raise
        except Exception as exc:
            raise SpecError(f"malformed spec: {exc}") from exc
        spec.validate()
        return spec


@dataclass(frozen=True)
class ClientInfo:
    """Device self-description sent with advertise/register calls."""

    client_id: str
    app_name: str
    workflow_name: str
    metadata: dict = field(default_factory=dict)
    attestation: str = ""

    def __post_init__(self):
        if not self.client_id:
            raise SpecError("client_id must be non-empty")
        if not self.app_name or not self.workflow_name:
            raise SpecError("app_name and workflow_name must be non-empty")

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "app_name": self.app_name,
            "workflow_name": self.workflow_name,
            "metadata": self.metadata,
            "attestation": self.attestation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClientInfo":
        return cls(
            client_id=str(d.get("client_id", "")),
            app_name=str(d.get("app_name", "")),
            workflow_name=str(d.get("workflow_name", "")),
            metadata=dict(d.get("metadata", {})),
            attestation=str(d.get("attestation", "")),
        )


def criteria_match(criteria: dict, metadata: dict) -> bool:
    """Evaluate a key->predicate mapping against client metadata.

    A predicate is a scalar (equality), a list (membership), or
    ``{"op": "eq" | "ne" | "in", "value": ...}``.  A key absent from the
    metadata fails every predicate except ``ne``.
    """
    for key, predicate in criteria.items():
        present = key in metadata
        value = metadata.get(key)
        if isinstance(predicate, dict):
            op = predicate.get("op", "eq")
            target = predicate.get("value")
        elif isinstance(predicate, list):
            op, target = "in", predicate
        else:
            op, target = "eq", predicate
        if op == "eq":
            if not present or value != target:
                return False
        elif op == "ne":
            if present and value == target:
                return False
        elif op == "in":
            if not present or value not in list(target):
                return False
        else:
            raise SpecError(f"unknown criteria op {op!r}")
    return True
