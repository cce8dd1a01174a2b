"""Pairwise-masking secure aggregation.

Each pair of virtual-group members agrees on a shared secret (X25519), turns
it into a per-round mask seed (HKDF-SHA256), and expands the seed into a
modular mask (SHA-256 in counter mode).  The lower-indexed member of a pair
adds the mask, the higher-indexed member subtracts it, so the element-wise
sum over a complete group telescopes back to the sum of the unmasked inputs:

    y_i = x_i + sum_{v > i} m(i, v) - sum_{v < i} m(v, i)   (mod M)
    sum_i y_i == sum_i x_i                                  (mod M)

All derivation strings below are normative and bit-exact: independent
implementations that follow them interoperate on the wire.

    seed = HKDF-SHA256(ikm  = X25519(own_private, peer_public),
                       salt = UTF-8(task_id),
                       info = "florinet-mask-v1" || LE32(round) || LE64(id_lo) || LE64(id_hi))
    stream = SHA256(seed || LE64(0)) || SHA256(seed || LE64(1)) || ...
    element[j] = low modulus_bits of stream[8j : 8j+8] as LE u64

Masks are expanded lazily from 32-byte seeds and never persisted.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .codec import QuantParams, QuantizedVector
from .errors import SecAggError

MASK_INFO_PREFIX = b"florinet-mask-v1"


@dataclass(frozen=True)
class KeyPair:
    """Raw X25519 key pair (32 bytes each side)."""

    private: bytes
    public: bytes


@dataclass(frozen=True)
class MaskSeed:
    """Shared 32-byte seed for one (pair, round); both endpoints derive it identically."""

    seed: bytes
    pair: tuple[int, int]
    round_id: int


def generate_keypair(entropy: bytes | None = None) -> KeyPair:
    """Fresh X25519 pair; pass 32 deterministic bytes only in tests."""
    if entropy is None:
        key = X25519PrivateKey.generate()
    else:
        if len(entropy) != 32:
            raise SecAggError("entropy must be 32 bytes")
        key = X25519PrivateKey.from_private_bytes(entropy)
    return KeyPair(
        private=key.private_bytes_raw(),
        public=key.public_key().public_bytes_raw(),
    )


def derive_mask_seed(
    own: KeyPair,
    peer_public: bytes,
    task_id: str,
    round_id: int,
    id_lo: int,
    id_hi: int,
) -> MaskSeed:
    """Derive the pairwise mask seed for participants (id_lo, id_hi) in one round."""
    if id_lo >= id_hi:
        raise SecAggError("pair indices must satisfy id_lo < id_hi")
    try:
        shared = X25519PrivateKey.from_private_bytes(own.private).exchange(
            X25519PublicKey.from_public_bytes(peer_public)
        )
    except ValueError as exc:
        # openssl rejects an all-zero shared secret (low-order peer point)
        raise SecAggError("degenerate key") from exc
    info = MASK_INFO_PREFIX + struct.pack("<I", round_id) + struct.pack("<QQ", id_lo, id_hi)
    seed = HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=task_id.encode("utf-8"),
        info=info,
    ).derive(shared)
    return MaskSeed(seed=seed, pair=(id_lo, id_hi), round_id=round_id)


def expand_mask(seed: MaskSeed, length: int, params: QuantParams) -> np.ndarray:
    """Expand a seed into ``length`` uniform elements on [0, M) (uint32)."""
    if length <= 0:
        raise SecAggError("length must be positive")
    n_blocks = (8 * length + 31) // 32
    s = seed.seed
    stream = b"".join(
        hashlib.sha256(s + struct.pack("<Q", i)).digest() for i in range(n_blocks)
    )
    words = np.frombuffer(stream, dtype="<u8", count=length)
    mask = np.uint64(params.modulus - 1)
    return (words & mask).astype(np.uint32)


def apply_masks(
    x: QuantizedVector,
    own_index: int,
    seeds: list[tuple[int, MaskSeed]],
) -> QuantizedVector:
    """Add/subtract all pairwise masks for this participant, mod M.

    ``seeds`` must contain exactly one entry per other roster member.  With an
    empty list (group of one) the input passes through unchanged.
    """
    peers = [p for p, _ in seeds]
    if len(set(peers)) != len(peers) or own_index in peers:
        raise SecAggError("incomplete pairing")
    p = x.params
    # M divides 2**32, so uint32 wraparound followed by masking is exact mod M.
    acc = x.values.copy()
    mod_mask = np.uint32(p.modulus - 1)
    for peer_index, seed in seeds:
        lo, hi = min(own_index, peer_index), max(own_index, peer_index)
        if seed.pair != (lo, hi):
            raise SecAggError("seed pair mismatch")
        m = expand_mask(seed, len(x), p)
        if own_index < peer_index:
            acc = acc + m
        else:
            acc = acc - m
    return QuantizedVector(values=acc & mod_mask, params=p)


def aggregate_masked(ys: list[QuantizedVector]) -> QuantizedVector:
    """Element-wise modular sum of a complete roster's masked submissions."""
    if not ys:
        raise SecAggError("no submissions")
    p = ys[0].params
    length = len(ys[0])
    acc = np.zeros(length, dtype=np.uint32)
    for y in ys:
        if y.params != p or len(y) != length:
            raise SecAggError("mismatched params or length")
        acc = acc + y.values
    return QuantizedVector(values=acc & np.uint32(p.modulus - 1), params=p)


def pairwise_seeds(
    own: KeyPair,
    own_index: int,
    roster: list[tuple[int, bytes]],
    task_id: str,
    round_id: int,
) -> list[tuple[int, MaskSeed]]:
    """Derive seeds against every other roster member; n-1 KDF invocations."""
    seeds = []
    for peer_index, peer_public in roster:
        if peer_index == own_index:
            continue
        lo, hi = min(own_index, peer_index), max(own_index, peer_index)
        seeds.append((peer_index, derive_mask_seed(own, peer_public, task_id, round_id, lo, hi)))
    return seeds
