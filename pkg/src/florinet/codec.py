"""Model vectors, quantization for modular masking, and the binary payload format.

Float model snapshots and pseudo-gradients travel as flat float64 vectors.
Secure aggregation needs modular integers, so vectors are clamped to a
symmetric per-element range ``[-r, r]`` and mapped onto ``[0, 2**bits - 1]``
with round-half-to-even.  The modulus is ``M = 2**(bits + ceil(log2 g_max))``:
the extra headroom bits guarantee that a sum of up to ``g_max`` quantized
elements never wraps, which is what lets the aggregate be "partially reversed"
back into a float mean.

Payload wire format (little-endian throughout)::

    magic   "FLPV"          4 bytes
    version u8 = 1
    kind    u8              0 = float64, 1 = quantized
    reserved u16 = 0
    length  u32
    -- kind == 1 only --
    clip_range  f64
    bits        u8
    group_max   u32
    -- body --
    elements    length x u32   (quantized)  |  length x f64  (float)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecError

MAGIC = b"FLPV"
VERSION = 1
KIND_FLOAT = 0
KIND_QUANTIZED = 1

_HEADER = struct.Struct("<4sBBHI")
_QUANT_HEADER = struct.Struct("<dBI")


def as_model_vector(values) -> np.ndarray:
    """Validate and return a 1-D float64 vector (finite, non-empty)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        v = v.reshape(-1)
    if v.size == 0:
        raise CodecError("empty vector")
    if not np.all(np.isfinite(v)):
        raise CodecError("non-finite value")
    return v


@dataclass(frozen=True)
class QuantParams:
    """Quantization grid: clip range, value bits, and group headroom."""

    clip_range: float
    bits: int
    group_max: int

    def __post_init__(self):
        if not (self.clip_range > 0 and math.isfinite(self.clip_range)):
            raise CodecError("clip_range must be positive and finite")
        if not 1 <= self.bits <= 24:
            raise CodecError("bits must be in [1, 24]")
        if self.group_max < 1:
            raise CodecError("group_max must be >= 1")
        if self.modulus_bits > 32:
            raise CodecError("modulus exceeds 32 bits")

    @property
    def modulus_bits(self) -> int:
        return self.bits + max(0, (self.group_max - 1).bit_length())

    @property
    def modulus(self) -> int:
        return 1 << self.modulus_bits

    @property
    def max_level(self) -> int:
        return (1 << self.bits) - 1

    def to_dict(self) -> dict:
        return {"clip_range": self.clip_range, "bits": self.bits, "group_max": self.group_max}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(clip_range=float(d["clip_range"]), bits=int(d["bits"]), group_max=int(d["group_max"]))


@dataclass(frozen=True)
class QuantizedVector:
    """Unsigned integer vector together with the grid that produced it."""

    values: np.ndarray
    params: QuantParams

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.uint32)
        if v.ndim != 1 or v.size == 0:
            raise CodecError("quantized vector must be non-empty and 1-D")
        if int(v.max()) >= self.params.modulus:
            raise CodecError("element >= modulus")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return int(self.values.size)


def quantize(v, params: QuantParams) -> QuantizedVector:
    """Clamp to [-r, r] and map onto [0, 2**bits - 1] with ties-to-even."""
    v = as_model_vector(v)
    r = params.clip_range
    clamped = np.clip(v, -r, r)
    # np.rint rounds half-to-even, matching every other platform's IEEE default.
    levels = np.rint((clamped + r) * (params.max_level / (2.0 * r)))
    return QuantizedVector(values=levels.astype(np.uint32), params=params)


def dequantize_mean(q_sum: QuantizedVector, n: int) -> np.ndarray:
    """Recover the float mean of ``n`` quantized vectors from their integer sum.

    Valid only when the sum was formed from exactly ``n <= group_max`` vectors,
    so the headroom bits rule out modular wraparound.
    """
    if n == 0:
        raise CodecError("empty aggregate")
    if n > q_sum.params.group_max:
        raise CodecError("headroom exceeded")
    p = q_sum.params
    s = q_sum.values.astype(np.float64)
    return (s / n) * (2.0 * p.clip_range / p.max_level) - p.clip_range


def encode_payload(v) -> bytes:
    """Serialize a float vector or QuantizedVector to payload bytes."""
    if isinstance(v, QuantizedVector):
        header = _HEADER.pack(MAGIC, VERSION, KIND_QUANTIZED, 0, len(v))
        p = v.params
        qh = _QUANT_HEADER.pack(p.clip_range, p.bits, p.group_max)
        body = v.values.astype("<u4").tobytes()
        return header + qh + body
    v = as_model_vector(v)
    header = _HEADER.pack(MAGIC, VERSION, KIND_FLOAT, 0, v.size)
    return header + v.astype("<f8").tobytes()


def decode_payload(data: bytes):
    """Parse payload bytes back into a float vector or QuantizedVector."""
    if len(data) < _HEADER.size:
        raise CodecError("truncated")
    magic, version, kind, reserved, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CodecError("bad magic")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    if reserved != 0:
        raise CodecError("nonzero reserved field")
    if length == 0:
        raise CodecError("empty vector")
    offset = _HEADER.size

    if kind == KIND_QUANTIZED:
        if len(data) < offset + _QUANT_HEADER.size:
            raise CodecError("truncated")
        clip_range, bits, group_max = _QUANT_HEADER.unpack_from(data, offset)
        offset += _QUANT_HEADER.size
        params = QuantParams(clip_range=clip_range, bits=bits, group_max=group_max)
        end = offset + 4 * length
        if len(data) < end:
            raise CodecError("truncated")
        if len(data) > end:
            raise CodecError("trailing bytes")
        values = np.frombuffer(data, dtype="<u4", count=length, offset=offset).copy()
        if int(values.max()) >= params.modulus:
            raise CodecError("element >= modulus")
        return QuantizedVector(values=values, params=params)

    if kind == KIND_FLOAT:
        end = offset + 8 * length
        if len(data) < end:
            raise CodecError("truncated")
        if len(data) > end:
            raise CodecError("trailing bytes")
        values = np.frombuffer(data, dtype="<f8", count=length, offset=offset).copy()
        if not np.all(np.isfinite(values)):
            raise CodecError("non-finite value")
        return values

    raise CodecError(f"unknown payload kind {kind}")


def payload_length(data: bytes) -> int:
    """Element count from the header alone, without decoding the body."""
    if len(data) < _HEADER.size:
        raise CodecError("truncated")
    magic, version, _, _, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION:
        raise CodecError("bad magic")
    return int(length)
