"""Exception types shared across the package.

Server handlers map these onto the wire error envelope, so every error that
can cross the HTTP boundary carries a stable ``code`` string and a
``retryable`` flag.
"""

from __future__ import annotations


class FlorinetError(Exception):
    """Base class; ``code`` feeds the wire error envelope."""

    code = "internal"
    retryable = False

    def __init__(self, message: str, *, code: str | None = None, retryable: bool | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code
        if retryable is not None:
            self.retryable = retryable


class CodecError(FlorinetError):
    """Malformed payload bytes or invalid vector contents."""

    code = "codec"


class SecAggError(FlorinetError):
    """Broken masking preconditions (pairing, key material)."""

    code = "secagg"


class AggregationError(FlorinetError):
    """Interim accumulation or master aggregation failure."""

    code = "aggregation"


class SpecError(FlorinetError):
    """Invalid task specification; message names every violated invariant."""

    code = "invalid_spec"


class ProtocolError(FlorinetError):
    """Client-visible protocol violation (bad ticket, late upload, ...)."""

    code = "protocol"


class StoreError(FlorinetError):
    """Persistence layer failure (corrupt or missing blobs)."""

    code = "store"
