"""Event-driven database kernel built from generic components."""
from .routing import RoutingPolicy
from .runtime import Topology, ThreadedExecutor, VirtualExecutor

__version__ = "0.1.0"
__all__ = ["RoutingPolicy", "Topology", "ThreadedExecutor", "VirtualExecutor"]
