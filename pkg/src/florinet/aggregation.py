"""Two-stage aggregation: virtual-group interim sums, then master aggregation.

Stage one accumulates client payloads per virtual group.  In secure
aggregation mode the accumulator is a modular integer sum and a group is
all-or-nothing: masks only cancel over a complete roster, so an incomplete
group at deadline is discarded.  In plaintext mode partial groups still yield
an interim.

Stage two combines the interim sums into a model delta: built-in mean or
weighted mean, or a user-supplied external command fed through a file-based
manifest (language-neutral, auditable)::

    manifest.json  {task_id, round, model_path, interims: [{path, count, weight}], output_path}

All payload files use the binary codec format; exit code 0 means success and
the command must have written a decodable payload of matching length to
``output_path``.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, secagg
from .codec import QuantizedVector, as_model_vector
from .errors import AggregationError
from .privacy import DpConfig

STRATEGY_KINDS = ("mean", "weighted_mean", "external")


@dataclass(frozen=True)
class AggregationStrategy:
    """How interims become the new model: built-in mean/weighted mean or external command."""

    kind: str = "mean"
    command: tuple[str, ...] = ()
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise AggregationError(f"strategy kind must be one of {STRATEGY_KINDS}")
        if self.kind == "external" and not self.command:
            raise AggregationError("external strategy requires a command")
        object.__setattr__(self, "command", tuple(self.command))

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "external":
            d["command"] = list(self.command)
            d["timeout_s"] = self.timeout_s
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationStrategy":
        return cls(
            kind=d.get("kind", "mean"),
            command=tuple(d.get("command", ())),
            timeout_s=float(d.get("timeout_s", 60.0)),
        )


@dataclass(frozen=True)
class Discarded:
    """Terminal value for a virtual group whose masks cannot cancel."""

    group_id: int
    reason: str


@dataclass(frozen=True)
class InterimResult:
    """One virtual group's contribution: float-space sum over n_g clients."""

    group_id: int
    contributors: int
    vector_sum: np.ndarray
    weight_sum: float

    def __post_init__(self):
        if self.contributors < 1:
            raise AggregationError("interim requires at least one contributor")


@dataclass
class VGAccumulator:
    """Submission sink for one virtual group.

    ``secure=True`` keeps a running modular sum (order-exact); plaintext mode
    keeps the individual contributions and sums them in participant order at
    finalize so equal inputs give bit-identical results regardless of arrival
    order.
    """

    group_id: int
    roster_size: int
    length: int
    secure: bool
    params: codec.QuantParams | None = None
    deadline: float | None = None
    received: set[int] = field(default_factory=set)
    _modular_sum: QuantizedVector | None = None
    _contributions: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.secure and self.params is None:
            raise AggregationError("secure accumulator needs quant params")

    @property
    def complete(self) -> bool:
        return len(self.received) == self.roster_size

    def accumulate(self, participant_index: int, payload, weight: float = 1.0) -> None:
        if participant_index in self.received:
            raise AggregationError("already contributed", code="duplicate")
        if not 0 <= participant_index < self.roster_size:
            raise AggregationError("participant index outside roster")
        if self.secure:
            if not isinstance(payload, QuantizedVector):
                raise AggregationError("secure group expects quantized payload")
            if payload.params != self.params:
                raise AggregationError("quantization params mismatch")
            if len(payload) != self.length:
                raise AggregationError("length mismatch")
            if self._modular_sum is None:
                self._modular_sum = payload
            else:
                self._modular_sum = secagg.aggregate_masked([self._modular_sum, payload])
        else:
            v = as_model_vector(payload)
            if v.size != self.length:
                raise AggregationError("length mismatch")
            self._contributions[participant_index] = (v, float(weight))
        self.received.add(participant_index)

    def finalize(self) -> InterimResult | Discarded:
        n = len(self.received)
        if self.secure:
            if not self.complete:
                return Discarded(self.group_id, f"incomplete group ({n}/{self.roster_size})")
            mean = codec.dequantize_mean(self._modular_sum, n)
            return InterimResult(
                group_id=self.group_id,
                contributors=n,
                vector_sum=mean * n,
                weight_sum=float(n),
            )
        if n == 0:
            return Discarded(self.group_id, "no contributions")
        total = np.zeros(self.length, dtype=np.float64)
        weight = 0.0
        # canonical content order: float addition order (and hence the exact
        # result bits) must not depend on racy participant-index assignment
        for v, w in sorted(self._contributions.values(), key=lambda c: (c[0].tobytes(), c[1])):
            total += v
            weight += w
        return InterimResult(group_id=self.group_id, contributors=n, vector_sum=total, weight_sum=weight)


def combine_interims(interims: list[InterimResult]) -> tuple[np.ndarray, int, float]:
    """Element-wise total over interims plus contributor and weight totals."""
    interims = [i for i in interims if isinstance(i, InterimResult)]
    if not interims:
        raise AggregationError("no interim results", code="round_failed")
    length = interims[0].vector_sum.size
    total = np.zeros(length, dtype=np.float64)
    count = 0
    weight = 0.0
    for i in interims:
        if i.vector_sum.size != length:
            raise AggregationError("interim length mismatch")
        total += i.vector_sum
        count += i.contributors
        weight += i.weight_sum
    return total, count, weight


def master_aggregate(
    interims: list[InterimResult],
    strategy: AggregationStrategy,
    current_model: np.ndarray,
) -> np.ndarray:
    """Fold interim sums into a new model (pseudo-gradient convention)."""
    interims = [i for i in interims if isinstance(i, InterimResult)]
    if not interims:
        raise AggregationError("no interim results", code="round_failed")
    current_model = as_model_vector(current_model)

    if strategy.kind == "external":
        return external_aggregate(strategy, interims, current_model)

    total, count, weight = combine_interims(interims)
    if total.size != current_model.size:
        raise AggregationError("interim length mismatch")
    denom = count if strategy.kind == "mean" else weight
    if denom == 0:
        raise AggregationError("zero total weight")
    return current_model + total / denom


def external_aggregate(
    strategy: AggregationStrategy,
    interims: list[InterimResult],
    current_model: np.ndarray,
    task_id: str = "",
    round_id: int = 0,
) -> np.ndarray:
    """Run the configured command against a manifest of payload files."""
    if strategy.kind != "external":
        raise AggregationError("strategy is not external")
    with tempfile.TemporaryDirectory(prefix="florinet-agg-") as tmp:
        tmp_path = Path(tmp)
        model_path = tmp_path / "current_model.bin"
        model_path.write_bytes(codec.encode_payload(current_model))
        entries = []
        for n, interim in enumerate(interims):
            p = tmp_path / f"interim_{n}.bin"
            p.write_bytes(codec.encode_payload(interim.vector_sum))
            entries.append({"path": str(p), "count": interim.contributors, "weight": interim.weight_sum})
        output_path = tmp_path / "new_model.bin"
        manifest = {
            "task_id": task_id,
            "round": round_id,
            "model_path": str(model_path),
            "interims": entries,
            "output_path": str(output_path),
        }
        manifest_path = tmp_path / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2))

        argv = list(strategy.command) + [str(manifest_path)]
        try:
            proc = subprocess.run(
                argv,
                cwd=tmp,
                capture_output=True,
                timeout=strategy.timeout_s,
            )
        except subprocess.TimeoutExpired as exc:
            raise AggregationError(f"external aggregator timed out after {strategy.timeout_s}s") from exc
        except OSError as exc:
            raise AggregationError(f"external aggregator failed to launch: {exc}") from exc
        if proc.returncode != 0:
            stderr = proc.stderr.decode("utf-8", "replace").strip()
            raise AggregationError(
                f"external aggregator exited {proc.returncode}: {stderr[-2000:]}"
            )
        if not output_path.exists():
            raise AggregationError("external aggregator wrote no output payload")
        try:
            new_model = codec.decode_payload(output_path.read_bytes())
        except Exception as exc:
            raise AggregationError(f"external aggregator output malformed: {exc}") from exc
        if not isinstance(new_model, np.ndarray) or new_model.size != current_model.size:
            raise AggregationError("external aggregator output length mismatch")
        return new_model


def apply_global_dp(
    aggregate_sum: np.ndarray,
    n_total: float,
    dp: DpConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noise the aggregated sum once, then divide by the contributor count."""
    if dp.mode != "global":
        raise AggregationError("dp mode is not global")
    if n_total == 0:
        raise AggregationError("no contributors")
    aggregate_sum = as_model_vector(aggregate_sum)
    noised = aggregate_sum + rng.normal(0.0, dp.noise_std, size=aggregate_sum.shape)
    return noised / n_total
