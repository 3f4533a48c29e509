__version__ = "0.1.0"

__all__ = [
    "DomainRuntime",
    "TimeBoundPolicy",
    "DdsLibrary",
    "LibraryConfig",
    "QosProfile",
    "Reliability",
    "HistoryKind",
    "Durability",
    "Daemon",
    "DaemonConfig",
    "NetConfig",
    "Endpoint",
    "SimulatedNetwork",
    "UdpTransport",
    "BenchConfig",
    "run_benchmark",
    "compute_stats",
    "DomainBusError",
]

from .bench import BenchConfig, compute_stats, run_benchmark
from .daemon import Daemon, DaemonConfig
from .dds import DdsLibrary, Durability, HistoryKind, LibraryConfig, QosProfile, Reliability
from .errors import DomainBusError
from .runtime import DomainRuntime, TimeBoundPolicy
from .transport import Endpoint, NetConfig, SimulatedNetwork, UdpTransport
