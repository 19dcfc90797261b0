"""Point-to-point messaging: simulated (virtual clock) and TCP backends."""

from .base import (HEADER, HEADER_SIZE, INTER, INTRA, Endpoint, EndpointClosed, NetworkProfile,
                   TransportError, UnknownDestination, UnsupportedOperation, WorkerId, layout)
from .sim import SimCluster, SimEndpoint, run_workers, virtual_elapsed
from .tcp import TcpEndpoint, local_mesh, parse_address

__all__ = [
    "HEADER", "HEADER_SIZE", "INTER", "INTRA", "Endpoint", "EndpointClosed", "NetworkProfile",
    "SimCluster", "SimEndpoint", "TcpEndpoint", "TransportError", "UnknownDestination",
    "UnsupportedOperation", "WorkerId", "layout", "local_mesh", "parse_address", "run_workers",
    "virtual_elapsed",
]
