"""Workspace delegation between agents: leases, pluggable transports, snapshot reconciliation."""

from .protocol import PROTOCOL_VERSION

__version__ = "0.1.0"

__all__ = ["PROTOCOL_VERSION", "__version__"]
