"""Attestation verifiers gating task admission.

The platform validates device integrity evidence before registration.  Real
verdict services (Play Integrity, SysIntegrity) are network calls against
vendor APIs; here the verifier is an interface taking opaque evidence so such
backends can be plugged in, with three local built-ins:

* accept-all (development default),
* static allowlist of evidence tokens,
* HMAC tokens: evidence must equal hex(HMAC-SHA256(key, client_id)).
"""

from __future__ import annotations

import hashlib
import hmac
from typing import Protocol

from .taskspec import ClientInfo


class AttestationVerifier(Protocol):
    def verify(self, client: ClientInfo) -> bool: ...


class AcceptAllVerifier:
    """No attestation requirement; suitable for simulators and tests."""

    def verify(self, client: ClientInfo) -> bool:
        return True


class StaticAllowlistVerifier:
    """Evidence must be one of a fixed set of tokens."""

    def __init__(self, tokens: set[str]):
        self._tokens = set(tokens)

    def verify(self, client: ClientInfo) -> bool:
        return bool(client.attestation) and client.attestation in self._tokens


class HmacTokenVerifier:
    """Evidence is hex(HMAC-SHA256(key, client_id)); forgeable only with the key."""

    def __init__(self, key: bytes):
        self._key = key

    def expected(self, client_id: str) -> str:
        return hmac.new(self._key, client_id.encode("utf-8"), hashlib.sha256).hexdigest()

    def verify(self, client: ClientInfo) -> bool:
        if not client.attestation:
            return False
        return hmac.compare_digest(client.attestation, self.expected(client.client_id))
