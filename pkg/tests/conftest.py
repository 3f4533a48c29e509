"""
Test configuration and fixtures for domainbus.
"""

import shutil
import socket
import tempfile
from dataclasses import dataclass
from pathlib import Path

import pytest

from domainbus.dds import DdsLibrary, LibraryConfig, QosProfile
from domainbus.heap import Descriptor
from domainbus.runtime import DomainContext, DomainRuntime, ProcessIdentity
from domainbus.transport import Endpoint, NetConfig, SimulatedNetwork

SMALL_REGION = 1024 * 1024


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    shutil.rmtree(temp_path)


@pytest.fixture
def runtime():
    """A fresh runtime with the default (record) time-bound policy."""
    return DomainRuntime()


@pytest.fixture
def app_ctx(runtime):
    """An application-mode context of a newly registered process."""
    return runtime.new_context(runtime.register_process())


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def small_config(**overrides) -> LibraryConfig:
    """Library config with a 1 MiB region and small tables."""
    options = dict(
        region_size=SMALL_REGION,
        region_limit=4 * SMALL_REGION,
        heap_slots_per_kind=256,
        receipt_capacity=64,
        reliable_window=64,
        trace=True,
    )
    options.update(overrides)
    return LibraryConfig(**options)


@dataclass
class App:
    """One simulated application process attached to a library instance."""

    lib: DdsLibrary
    identity: ProcessIdentity
    ctx: DomainContext
    participant: Descriptor

    def topic(self, name: str, max_len: int = 4096, qos: QosProfile | None = None) -> Descriptor:
        found = self.lib.find_topic(self.ctx, name)
        if found is not None:
            return found
        return self.lib.create_topic(self.ctx, self.participant, name, max_len, qos)

    def writer(self, topic: Descriptor) -> Descriptor:
        return self.lib.create_writer(self.ctx, self.participant, topic)

    def reader(self, topic: Descriptor) -> Descriptor:
        return self.lib.create_reader(self.ctx, self.participant, topic)

    def publish(self, writer: Descriptor, data: bytes) -> int:
        return self.lib.publish(self.ctx, writer, data)

    def take(self, reader: Descriptor, capacity: int = 4096, max_samples: int = 64):
        return self.lib.take_payloads(self.ctx, reader, capacity, max_samples, fast_path=False)


def attach(lib: DdsLibrary) -> App:
    identity = lib.register_process()
    ctx = lib.context(identity)
    return App(lib, identity, ctx, lib.create_participant(ctx))


@pytest.fixture
def library():
    """A library instance without a transport."""
    return DdsLibrary(small_config())


@pytest.fixture
def make_app(library):
    """Factory for application processes on the shared library fixture."""
    return lambda: attach(library)


@pytest.fixture
def sim_pair():
    """Two library instances joined by a zero-delay, loss-free simulated network."""
    net = SimulatedNetwork(NetConfig())
    ep_a, ep_b = Endpoint("sim", 1), Endpoint("sim", 2)
    lib_a = DdsLibrary(small_config(), net, ep_a)
    lib_b = DdsLibrary(small_config(), net, ep_b)
    yield net, lib_a, lib_b
    net.close()


def pump(*libs: DdsLibrary, rounds: int = 50) -> None:
    """Drive RX processing and TX flushing by hand until nothing moves."""
    for _ in range(rounds):
        moved = 0
        for lib in libs:
            ctx = lib.context(lib.system, trusted=True)
            while lib.rx_queue is not None and len(lib.rx_queue):
                moved += lib.process_rx_batch(ctx, lib.rx_queue.poll(lib.config.rx_batch))
            while lib.tx_backlog:
                moved += lib.flush_tx(ctx)
        if not moved:
            return


@pytest.fixture
def api_client():
    """FastAPI test client for the status/benchmark API."""
    from fastapi.testclient import TestClient

    from domainbus.api import api

    return TestClient(api)
