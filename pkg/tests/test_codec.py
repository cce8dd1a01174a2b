"""Quantization, dequantization, and payload codec tests."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from florinet import codec
from florinet.codec import QuantParams, QuantizedVector
from florinet.errors import CodecError


def quantize_oracle(x: float, r: float, bits: int) -> int:
    """Exact-rational evaluation of the closed-form quantizer (ties to even)."""
    x = min(max(x, -r), r)
    scaled = (Fraction(x) + Fraction(r)) * ((2**bits) - 1) / (2 * Fraction(r))
    floor = scaled.numerator // scaled.denominator
    frac = scaled - floor
    if frac > Fraction(1, 2):
        return floor + 1
    if frac < Fraction(1, 2):
        return floor
    return floor + 1 if floor % 2 else floor


class TestQuantize:
    def test_midpoint_rounds_to_even(self):
        p = QuantParams(clip_range=1.0, bits=16, group_max=1)
        q = codec.quantize([0.0], p)
        assert q.values[0] == 32768  # round(32767.5) under ties-to-even

    def test_range_endpoints(self):
        p = QuantParams(clip_range=1.0, bits=8, group_max=1)
        q = codec.quantize([-1.0, 1.0], p)
        assert q.values.tolist() == [0, 255]

    def test_out_of_range_clamps(self):
        p = QuantParams(clip_range=0.5, bits=8, group_max=1)
        q = codec.quantize([-10.0, 10.0], p)
        assert q.values.tolist() == [0, 255]

    def test_against_rational_oracle(self):
        p = QuantParams(clip_range=1.0, bits=8, group_max=1)
        values = [0.25, -0.5, 0.9]
        q = codec.quantize(values, p)
        expected = [quantize_oracle(x, 1.0, 8) for x in values]
        assert q.values.tolist() == expected

    @given(
        st.lists(st.floats(-4, 4, allow_nan=False), min_size=1, max_size=40),
        st.integers(1, 16),
        st.floats(0.1, 8.0),
    )
    @settings(max_examples=150, deadline=None)
    def test_matches_oracle_everywhere(self, values, bits, r):
        p = QuantParams(clip_range=r, bits=bits, group_max=1)
        q = codec.quantize(values, p)
        for got, x in zip(q.values.tolist(), values):
            expected = quantize_oracle(x, r, bits)
            scaled = (Fraction(min(max(x, -r), r)) + Fraction(r)) * p.max_level / (2 * Fraction(r))
            dist_to_tie = abs(scaled - (scaled.numerator // scaled.denominator) - Fraction(1, 2))
            if dist_to_tie > Fraction(1, 2**30):
                # away from a rounding tie the float64 path is exact
                assert got == expected
            else:
                # within a float ulp of a tie either neighbour is a faithful answer
                assert abs(got - expected) <= 1

    @given(st.integers(1, 16), st.floats(0.25, 4.0))
    @settings(max_examples=50, deadline=None)
    def test_monotone_and_onto(self, bits, r):
        p = QuantParams(clip_range=r, bits=bits, group_max=1)
        xs = np.linspace(-r, r, 257)
        q = codec.quantize(xs, p).values
        assert np.all(np.diff(q.astype(np.int64)) >= 0)
        assert q[0] == 0 and q[-1] == p.max_level

    def test_nan_rejected(self):
        p = QuantParams(clip_range=1.0, bits=8, group_max=1)
        with pytest.raises(CodecError, match="non-finite"):
            codec.quantize([float("nan")], p)


class TestQuantParams:
    def test_modulus_headroom(self):
        p = QuantParams(clip_range=1.0, bits=16, group_max=8)
        assert p.modulus_bits == 19
        assert p.modulus == 1 << 19

    def test_group_of_one_has_no_headroom(self):
        p = QuantParams(clip_range=1.0, bits=16, group_max=1)
        assert p.modulus_bits == 16

    def test_modulus_cap(self):
        with pytest.raises(CodecError, match="32 bits"):
            QuantParams(clip_range=1.0, bits=24, group_max=1 << 10)

    @given(st.integers(1, 16), st.integers(1, 64))
    @settings(max_examples=100, deadline=None)
    def test_sum_never_wraps(self, bits, g_max):
        p = QuantParams(clip_range=1.0, bits=bits, group_max=g_max)
        assert g_max * p.max_level < p.modulus


class TestDequantizeMean:
    def test_single_round_trip_error_bound(self):
        p = QuantParams(clip_range=1.0, bits=12, group_max=1)
        rng = np.random.default_rng(7)
        v = rng.uniform(-1, 1, size=64)
        back = codec.dequantize_mean(codec.quantize(v, p), 1)
        assert np.max(np.abs(back - v)) <= p.clip_range / p.max_level

    def test_four_clients_all_ones(self):
        # the platform's dummy task: every client uploads ones
        p = QuantParams(clip_range=2.0, bits=16, group_max=4)
        ones = np.ones(5)
        total = np.zeros(5, dtype=np.uint64)
        for _ in range(4):
            total += codec.quantize(ones, p).values
        q_sum = QuantizedVector(values=total.astype(np.uint32), params=p)
        mean = codec.dequantize_mean(q_sum, 4)
        assert np.max(np.abs(mean - 1.0)) <= p.clip_range / p.max_level

    @given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_mean_of_sum_matches_float_oracle(self, n, length, seed):
        p = QuantParams(clip_range=1.5, bits=10, group_max=8)
        rng = np.random.default_rng(seed)
        vs = [rng.uniform(-1.5, 1.5, size=length) for _ in range(n)]
        total = np.zeros(length, dtype=np.uint64)
        for v in vs:
            total += codec.quantize(v, p).values
        q_sum = QuantizedVector(values=total.astype(np.uint32), params=p)
        mean = codec.dequantize_mean(q_sum, n)
        float_mean = np.mean([np.clip(v, -1.5, 1.5) for v in vs], axis=0)
        assert np.max(np.abs(mean - float_mean)) <= p.clip_range / p.max_level

    def test_zero_clients_rejected(self):
        p = QuantParams(clip_range=1.0, bits=8, group_max=4)
        q = codec.quantize([0.0], p)
        with pytest.raises(CodecError, match="empty aggregate"):
            codec.dequantize_mean(q, 0)

    def test_headroom_exceeded_rejected(self):
        p = QuantParams(clip_range=1.0, bits=8, group_max=4)
        q = codec.quantize([0.0], p)
        with pytest.raises(CodecError, match="headroom"):
            codec.dequantize_mean(q, 5)


# produced once by hand from the header layout (see module docstring)
GOLDEN_QUANTIZED_PAYLOAD = bytes.fromhex(
    "464c50560101000003000000000000000000f03f0804000000010000000200000003000000"
)


class TestPayload:
    def test_golden_quantized_bytes(self):
        p = QuantParams(clip_range=1.0, bits=8, group_max=4)
        v = QuantizedVector(values=np.array([1, 2, 3], dtype=np.uint32), params=p)
        assert codec.encode_payload(v) == GOLDEN_QUANTIZED_PAYLOAD
        back = codec.decode_payload(GOLDEN_QUANTIZED_PAYLOAD)
        assert isinstance(back, QuantizedVector)
        assert back.values.tolist() == [1, 2, 3]
        assert back.params == p

    def test_float_round_trip_bit_exact(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal(17)
        back = codec.decode_payload(codec.encode_payload(v))
        assert back.tobytes() == v.tobytes()

    @given(st.lists(st.floats(-1e12, 1e12, allow_nan=False), min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_encode_decode_involution(self, values):
        b = codec.encode_payload(np.array(values))
        assert codec.encode_payload(codec.decode_payload(b)) == b

    def test_truncated_body(self):
        # header claims 3 elements, body carries 2
        p = QuantParams(clip_range=1.0, bits=8, group_max=4)
        v = QuantizedVector(values=np.array([1, 2, 3], dtype=np.uint32), params=p)
        data = codec.encode_payload(v)[:-4]
        with pytest.raises(CodecError, match="truncated"):
            codec.decode_payload(data)

    def test_bad_magic(self):
        data = b"XXXX" + GOLDEN_QUANTIZED_PAYLOAD[4:]
        with pytest.raises(CodecError, match="bad magic"):
            codec.decode_payload(data)

    def test_version_mismatch(self):
        data = bytearray(GOLDEN_QUANTIZED_PAYLOAD)
        data[4] = 9
        with pytest.raises(CodecError, match="version"):
            codec.decode_payload(bytes(data))

    def test_element_at_or_above_modulus(self):
        p = QuantParams(clip_range=1.0, bits=8, group_max=4)  # M = 2**10
        good = codec.encode_payload(
            QuantizedVector(values=np.array([0], dtype=np.uint32), params=p)
        )
        bad = good[:-4] + (1 << 10).to_bytes(4, "little")
        with pytest.raises(CodecError, match="modulus"):
            codec.decode_payload(bad)

    def test_trailing_bytes_rejected(self):
        with pytest.raises(CodecError, match="trailing"):
            codec.decode_payload(GOLDEN_QUANTIZED_PAYLOAD + b"\x00")

    def test_non_finite_float_rejected(self):
        data = codec.encode_payload(np.array([1.0]))
        bad = data[: -8] + np.array([np.inf]).tobytes()
        with pytest.raises(CodecError, match="non-finite"):
            codec.decode_payload(bad)

    def test_payload_length_peek(self):
        assert codec.payload_length(GOLDEN_QUANTIZED_PAYLOAD) == 3
