"""
Integration tests for domainbus.

These tests run several application processes on two library instances and
check that the pieces work together: local fan-out, network relay, the
daemons and reclamation after a crash.
"""

import threading
import time

import pytest

from domainbus.daemon import Daemon, DaemonConfig
from domainbus.dds import DdsLibrary
from domainbus.errors import BackpressureFull
from domainbus.transport import Endpoint, NetConfig, SimulatedNetwork
from tests.conftest import attach, pump, small_config

SECOND = 1_000_000_000


def wait_until(predicate, timeout_s: float = 5.0) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.005)
    return predicate()


def relay_topology(lib_a: DdsLibrary, lib_b: DdsLibrary):
    """Driver and listener on A, relay on B: ping goes A to B, pong comes back."""
    driver, listener, relay = attach(lib_a), attach(lib_a), attach(lib_b)

    ping_a = driver.topic("ping")
    ping_writer = driver.writer(ping_a)
    lib_a.add_peer(driver.ctx, ping_a, lib_b.endpoint)
    ping_reader = relay.reader(relay.topic("ping"))

    pong_b = relay.topic("pong")
    pong_writer = relay.writer(pong_b)
    lib_b.add_peer(relay.ctx, pong_b, lib_a.endpoint)
    pong_reader = listener.reader(listener.topic("pong"))

    return driver, relay, listener, ping_writer, ping_reader, pong_writer, pong_reader


@pytest.mark.integration
class TestRelayChain:
    """Test a driver, relay and listener spread over two instances."""

    def test_round_trip(self, sim_pair):
        _, lib_a, lib_b = sim_pair
        driver, relay, listener, ping_w, ping_r, pong_w, pong_r = relay_topology(lib_a, lib_b)

        sent = [f"sample-{i}".encode() for i in range(10)]
        for data in sent:
            driver.publish(ping_w, data)
        pump(lib_a, lib_b)

        for _, data in relay.take(ping_r):
            relay.publish(pong_w, data)
        pump(lib_a, lib_b)

        back = listener.take(pong_r)
        assert [data for _, data in back] == sent
        assert [t.sequence for t, _ in back] == list(range(1, 11))

    def test_local_and_remote_fan_out(self, sim_pair):
        _, lib_a, lib_b = sim_pair
        driver, relay, listener, ping_w, ping_r, _, _ = relay_topology(lib_a, lib_b)
        local = attach(lib_a)
        local_r = local.reader(local.topic("ping"))

        driver.publish(ping_w, b"both")
        pump(lib_a, lib_b)

        assert [d for _, d in local.take(local_r)] == [b"both"]
        assert [d for _, d in relay.take(ping_r)] == [b"both"]
        assert lib_a.counters["copies"] == 1

    def test_samples_released_after_acknowledgment(self, sim_pair):
        _, lib_a, lib_b = sim_pair
        driver, relay, _, ping_w, ping_r, _, _ = relay_topology(lib_a, lib_b)
        for i in range(5):
            driver.publish(ping_w, bytes([i]) * 16)
        pump(lib_a, lib_b)
        relay.take(ping_r)

        ctx = lib_a.context(lib_a.system, trusted=True)
        lib_a.send_heartbeats(ctx, 0, SECOND)
        lib_a.send_heartbeats(ctx, SECOND, SECOND)
        pump(lib_a, lib_b)

        assert lib_a.snapshot()["live_sample"] == 0
        assert lib_b.counters["acknacks_sent"] >= 1

    def test_lossy_network_round_trip(self):
        net = SimulatedNetwork(NetConfig(loss_prob=0.2, reorder_prob=0.1, seed=11))
        lib_a = DdsLibrary(small_config(), net, Endpoint("sim", 1))
        lib_b = DdsLibrary(small_config(), net, Endpoint("sim", 2))
        try:
            driver, relay, listener, ping_w, ping_r, pong_w, pong_r = relay_topology(lib_a, lib_b)
            sent = [i.to_bytes(4, "little") for i in range(30)]
            for data in sent:
                driver.publish(ping_w, data)

            ctx_a = lib_a.context(lib_a.system, trusted=True)
            ctx_b = lib_b.context(lib_b.system, trusted=True)
            back = []
            now = 0
            for _ in range(400):
                for _, data in relay.take(ping_r):
                    relay.publish(pong_w, data)
                back += [data for _, data in listener.take(pong_r)]
                if len(back) == len(sent):
                    break
                now += SECOND
                lib_a.send_heartbeats(ctx_a, now, SECOND)
                lib_b.send_heartbeats(ctx_b, now, SECOND)
                pump(lib_a, lib_b)

            assert back == sent
            assert lib_a.counters["retransmits"] + lib_b.counters["retransmits"] > 0
        finally:
            net.close()


@pytest.mark.integration
class TestDaemonDriven:
    """Test delivery with daemons doing all RX and TX work."""

    @pytest.mark.parametrize("force_mode", ["event", "poll"])
    def test_waitset_listener(self, sim_pair, force_mode):
        _, lib_a, lib_b = sim_pair
        pub, sub = attach(lib_a), attach(lib_b)
        topic = pub.topic("t")
        writer = pub.writer(topic)
        lib_a.add_peer(pub.ctx, topic, lib_b.endpoint)
        reader = sub.reader(sub.topic("t"))
        waitset = lib_b.create_waitset(sub.ctx, [reader])

        received = []

        def listen():
            while len(received) < 20:
                if lib_b.waitset_wait(sub.ctx, waitset, 2 * SECOND):
                    received.extend(data for _, data in sub.take(reader))
                else:
                    return

        daemons = [
            Daemon(lib, DaemonConfig(force_mode=force_mode, heartbeat_period_ns=20_000_000)).start()
            for lib in (lib_a, lib_b)
        ]
        listener = threading.Thread(target=listen)
        listener.start()
        try:
            for i in range(20):
                pub.publish(writer, bytes([i]))
                time.sleep(0.002)
            listener.join(10)
        finally:
            for daemon in daemons:
                daemon.stop()

        assert received == [bytes([i]) for i in range(20)]
        assert all(daemon.errors == 0 for daemon in daemons)


@pytest.mark.integration
class TestCrashRecovery:
    """Test that a crashed process does not disturb the others."""

    def test_crashed_listener_is_reclaimed(self, library):
        pub, healthy, doomed = attach(library), attach(library), attach(library)
        topic = pub.topic("t")
        writer = pub.writer(topic)
        healthy_reader = healthy.reader(topic)
        doomed.reader(topic)

        pub.publish(writer, b"before")
        library.terminate_process(doomed.identity.pid)

        daemon = Daemon(library, DaemonConfig(reclaim_period_ns=1_000_000)).start()
        try:
            assert wait_until(lambda: daemon.reclaimed >= 2)
        finally:
            daemon.stop()

        pub.publish(writer, b"after")
        assert [d for _, d in healthy.take(healthy_reader)] == [b"before", b"after"]
        assert library.snapshot()["live_reader"] == 1
        assert library.snapshot()["live_participant"] == 2


@pytest.mark.integration
@pytest.mark.slow
class TestSustainedLoss:
    """Test that a reliable stream survives a long run over a lossy link."""

    def test_ten_thousand_samples_at_ten_percent_loss(self):
        count = 10_000
        net = SimulatedNetwork(NetConfig(loss_prob=0.1, seed=23))
        config = small_config(reliable_window=128, receipt_capacity=256, heap_slots_per_kind=1024)
        lib_a = DdsLibrary(config, net, Endpoint("sim", 1))
        lib_b = DdsLibrary(config, net, Endpoint("sim", 2))
        try:
            pub, sub = attach(lib_a), attach(lib_b)
            topic_a = pub.topic("stream")
            writer = pub.writer(topic_a)
            lib_a.add_peer(pub.ctx, topic_a, lib_b.endpoint)
            reader = sub.reader(sub.topic("stream"))

            ctx = lib_a.context(lib_a.system, trusted=True)
            received = []
            sent = 0
            now = 0
            for _ in range(20_000):
                while sent < count:
                    try:
                        pub.publish(writer, sent.to_bytes(4, "little") * 256)
                    except BackpressureFull:
                        break
                    sent += 1
                pump(lib_a, lib_b)
                received += sub.take(reader, capacity=1024)
                if len(received) == count and lib_a.snapshot()["live_sample"] == 0:
                    break
                now += SECOND
                lib_a.send_heartbeats(ctx, now, SECOND)
                pump(lib_a, lib_b)

            assert [t.sequence for t, _ in received] == list(range(1, count + 1))
            assert all(data == (i.to_bytes(4, "little") * 256) for i, (_, data) in enumerate(received))
            assert lib_a.counters["retransmits"] > 0
            assert lib_a.snapshot()["live_sample"] == 0
        finally:
            net.close()
