"""Desk-scale cross-device federated learning.

Core value types and transforms live in :mod:`florinet.codec`,
:mod:`florinet.secagg`, :mod:`florinet.privacy`, and
:mod:`florinet.aggregation`.  The service side is
:mod:`florinet.orchestrator` behind the REST surface in
:mod:`florinet.server`; the device side is :mod:`florinet.client`.
:mod:`florinet.simulator` drives fleets of in-process clients against a live
server, and :mod:`florinet.cli` wraps everything for the shell.
"""

__version__ = "0.1.0"

from .aggregation import AggregationStrategy, Discarded, InterimResult, VGAccumulator
from .codec import QuantParams, QuantizedVector, as_model_vector
from .errors import FlorinetError
from .privacy import AccountantState, DpConfig

__all__ = [
    "AccountantState",
    "AggregationStrategy",
    "Discarded",
    "DpConfig",
    "FlorinetError",
    "InterimResult",
    "QuantParams",
    "QuantizedVector",
    "VGAccumulator",
    "as_model_vector",
    "__version__",
]
