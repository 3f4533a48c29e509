"""
Driver / relay / listener latency benchmark.

The driver publishes timestamped samples at a fixed rate on "ping", the relay
republishes every payload unchanged on "pong", and the listener measures the
round trip from the embedded timestamp. In the network topology the relay
lives on a second library instance reached through the transport; in the
local topology all three roles share one instance.
"""

import csv
import logging
import math
import os
import struct
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .buffers import DEFAULT_REGION_SIZE, GRANULE_SIZE
from .daemon import (
    DEFAULT_SWITCH_DOWN_HZ,
    DEFAULT_SWITCH_UP_HZ,
    Daemon,
    DaemonConfig,
    ForceMode,
)
from .dds import DdsLibrary, LibraryConfig, QosProfile, Reliability
from .errors import BackpressureFull, DomainBusError, EmptyInput, IoFailure
from .heap import Descriptor
from .runtime import DomainContext, TimeBoundPolicy
from .transport import Endpoint, NetConfig, TransportKind, create_transport

logger = logging.getLogger(__name__)

TIMESTAMP = struct.Struct("<Q")
CSV_HEADER = [
    "size_bytes",
    "rate_hz",
    "n",
    "mean_ns",
    "trimmed_mean_ns",
    "p50_ns",
    "p99_ns",
    "min_ns",
    "max_ns",
    "mode_switches",
    "copies_per_sample",
]
WAIT_SLICE_NS = 50_000_000


class Topology(Enum):
    NETWORK = "network"
    LOCAL = "local"


class BenchConfig:
    """One benchmark configuration. Times in ns, rates in Hz."""

    def __init__(
        self,
        sample_len: int = 64,
        rate_hz: float = 100.0,
        count: int = 1000,
        trim_fraction: float = 0.10,
        eager_notify: bool = True,
        net: NetConfig | None = None,
        force_mode: ForceMode | str = ForceMode.AUTO,
        topology: Topology | str = Topology.NETWORK,
        reliability: Reliability | str = Reliability.RELIABLE,
        heartbeat_period_ns: int = 1_000_000_000,
        switch_up_hz: float = DEFAULT_SWITCH_UP_HZ,
        switch_down_hz: float = DEFAULT_SWITCH_DOWN_HZ,
        wake_cost_ns: int = 5_000,
        region_size: int = DEFAULT_REGION_SIZE,
        region_limit: int | None = None,
        granule_size: int = GRANULE_SIZE,
        heap_slots_per_kind: int = 4096,
        udp_host: str = "127.0.0.1",
        udp_ports: tuple[int, int] = (7400, 7401),
        time_bound: TimeBoundPolicy | None = None,
        timeout_s: float | None = None,
    ):
        if rate_hz <= 0:
            raise ValueError(f"rate_hz must be > 0, got {rate_hz}")
        if not 0 <= trim_fraction < 1:
            raise ValueError(f"trim_fraction must be in [0, 1), got {trim_fraction}")
        if sample_len < TIMESTAMP.size:
            raise ValueError(f"sample_len must hold an {TIMESTAMP.size}-byte timestamp")
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        self.sample_len = sample_len
        self.rate_hz = rate_hz
        self.count = count
        self.trim_fraction = trim_fraction
        self.eager_notify = eager_notify
        self.net = net or NetConfig()
        self.force_mode = ForceMode(force_mode)
        self.topology = Topology(topology)
        self.reliability = Reliability(reliability)
        self.heartbeat_period_ns = heartbeat_period_ns
        self.switch_up_hz = switch_up_hz
        self.switch_down_hz = switch_down_hz
        self.wake_cost_ns = wake_cost_ns
        self.region_size = region_size
        self.region_limit = region_limit if region_limit is not None else region_size * 4
        self.granule_size = granule_size
        self.heap_slots_per_kind = heap_slots_per_kind
        self.udp_host = udp_host
        self.udp_ports = udp_ports
        self.time_bound = time_bound
        # run length plus a grace period for retransmissions
        self.timeout_s = timeout_s if timeout_s is not None else count / rate_hz + 10.0


@dataclass(frozen=True)
class LatencyStats:
    n: int
    mean: float
    trimmed_mean: float
    p50: int
    p99: int
    min: int
    max: int


@dataclass
class SendRecord:
    index: int
    deadline_ns: int
    sent_ns: int
    sequence: int


@dataclass
class ListenerLog:
    latencies: list[int] = field(default_factory=list)
    sequences: list[int] = field(default_factory=list)
    payload_errors: int = 0


@dataclass
class BenchResult:
    size_bytes: int
    rate_hz: float
    stats: LatencyStats | None
    sent: int
    received: int
    mode_switches: int
    copies_per_sample: float
    cpu_utilization: dict[str, float] = field(default_factory=dict)
    sequences_in_order: bool = True

    def csv_row(self) -> list:
        s = self.stats
        return [
            self.size_bytes,
            self.rate_hz,
            s.n if s else 0,
            s.mean if s else "",
            s.trimmed_mean if s else "",
            s.p50 if s else "",
            s.p99 if s else "",
            s.min if s else "",
            s.max if s else "",
            self.mode_switches,
            self.copies_per_sample,
        ]


# ---------- statistics ----------
def nearest_rank(sorted_values: Sequence[int], percent: int) -> int:
    """Smallest value with at least `percent` % of the data at or below it."""
    n = len(sorted_values)
    rank = max(1, -(-percent * n // 100))
    return sorted_values[min(rank, n) - 1]


def compute_stats(latencies: Sequence[int], trim_fraction: float = 0.10) -> LatencyStats:
    n = len(latencies)
    if n == 0:
        raise EmptyInput("no latency samples")
    if not 0 <= trim_fraction < 1:
        raise ValueError(f"trim_fraction must be in [0, 1), got {trim_fraction}")
    ordered = np.sort(np.asarray(latencies, dtype=np.int64))
    worst = min(math.ceil(round(trim_fraction * n, 9)), n - 1)
    values = ordered.tolist()
    return LatencyStats(
        n=n,
        mean=float(np.mean(ordered)),
        trimmed_mean=float(np.mean(ordered[: n - worst])),
        p50=nearest_rank(values, 50),
        p99=nearest_rank(values, 99),
        min=values[0],
        max=values[-1],
    )


def emit_csv(results: Sequence[BenchResult], path: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            for result in results:
                writer.writerow(result.csv_row())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    logger.info(f"📝 wrote {len(results)} result rows to {path}")


# ---------- roles ----------
def make_payload(sample_len: int, timestamp_ns: int) -> bytes:
    """Timestamp first, zero filler after."""
    return TIMESTAMP.pack(timestamp_ns) + bytes(sample_len - TIMESTAMP.size)


def deadline(t0_ns: int, k: int, rate_hz: float) -> int:
    return t0_ns + int(k * 1_000_000_000 // rate_hz)


def _publish_retrying(
    lib: DdsLibrary, ctx: DomainContext, writer: Descriptor, data: bytes, stop: threading.Event
) -> int | None:
    while not stop.is_set():
        try:
            return lib.publish(ctx, writer, data)
        except BackpressureFull:
            time.sleep(0.0005)
    return None


def run_driver(
    lib: DdsLibrary,
    ctx: DomainContext,
    writer: Descriptor,
    config: BenchConfig,
    stop: threading.Event | None = None,
    clock: Callable[[], int] = time.monotonic_ns,
    sleep: Callable[[float], None] = time.sleep,
) -> list[SendRecord]:
    """Deadline pacing: deadline k is t0 + k/rate, so a late send never shifts later ones."""
    stop = stop or threading.Event()
    log: list[SendRecord] = []
    t0 = clock()
    for k in range(config.count):
        due = deadline(t0, k, config.rate_hz)
        now = clock()
        if now < due:
            sleep((due - now) / 1e9)
        sent_ns = clock()
        sequence = _publish_retrying(lib, ctx, writer, make_payload(config.sample_len, sent_ns), stop)
        if sequence is None:
            break
        log.append(SendRecord(k, due, sent_ns, sequence))
    return log


def _take_all(lib: DdsLibrary, ctx: DomainContext, reader: Descriptor, capacity: int):
    return lib.take_payloads(ctx, reader, capacity, max_samples=16, fast_path=False)


def run_relay(
    lib: DdsLibrary,
    ctx: DomainContext,
    reader: Descriptor,
    waitset: Descriptor,
    writer: Descriptor,
    config: BenchConfig,
    stop: threading.Event,
) -> int:
    """Republish every received payload unchanged. Returns the relayed count."""
    relayed = 0
    while not stop.is_set() and relayed < config.count:
        if not lib.waitset_wait(ctx, waitset, WAIT_SLICE_NS):
            continue
        for _, payload in _take_all(lib, ctx, reader, config.sample_len):
            if _publish_retrying(lib, ctx, writer, payload, stop) is None:
                return relayed
            relayed += 1
    return relayed


def run_listener(
    lib: DdsLibrary,
    ctx: DomainContext,
    reader: Descriptor,
    waitset: Descriptor,
    config: BenchConfig,
    stop: threading.Event,
    clock: Callable[[], int] = time.monotonic_ns,
) -> ListenerLog:
    """Latency per sample from the embedded timestamp."""
    log = ListenerLog()
    filler = bytes(config.sample_len - TIMESTAMP.size)
    while not stop.is_set() and len(log.latencies) < config.count:
        if not lib.waitset_wait(ctx, waitset, WAIT_SLICE_NS):
            continue
        for taken, payload in _take_all(lib, ctx, reader, config.sample_len):
            now = clock()
            (stamp,) = TIMESTAMP.unpack_from(payload)
            if payload[TIMESTAMP.size :] != filler:
                log.payload_errors += 1
            log.latencies.append(now - stamp)
            log.sequences.append(taken.sequence)
    return log


# ---------- orchestration ----------
@dataclass
class _Role:
    lib: DdsLibrary
    ctx: DomainContext
    participant: Descriptor


def _role(lib: DdsLibrary) -> _Role:
    ctx = lib.context(lib.register_process())
    return _Role(lib, ctx, lib.create_participant(ctx))


def _topic(role: _Role, name: str, config: BenchConfig, qos: QosProfile) -> Descriptor:
    existing = role.lib.find_topic(role.ctx, name)
    if existing is not None:
        return existing
    return role.lib.create_topic(role.ctx, role.participant, name, config.sample_len, qos)


def _library_config(config: BenchConfig) -> LibraryConfig:
    return LibraryConfig(
        eager_notify=config.eager_notify,
        wake_cost_ns=config.wake_cost_ns,
        region_size=config.region_size,
        region_limit=config.region_limit,
        granule_size=config.granule_size,
        heap_slots_per_kind=config.heap_slots_per_kind,
        time_bound=config.time_bound,
    )


def run_benchmark(config: BenchConfig) -> BenchResult:
    qos = QosProfile(reliability=config.reliability)
    stop = threading.Event()
    transport = None
    daemons: list[Daemon] = []
    daemon_config = DaemonConfig(
        heartbeat_period_ns=config.heartbeat_period_ns,
        switch_up_hz=config.switch_up_hz,
        switch_down_hz=config.switch_down_hz,
        force_mode=config.force_mode,
    )

    if config.topology is Topology.NETWORK:
        transport = create_transport(config.net)
        host = config.udp_host if config.net.transport is TransportKind.UDP else "sim"
        ep_a, ep_b = Endpoint(host, config.udp_ports[0]), Endpoint(host, config.udp_ports[1])
        lib_a = DdsLibrary(_library_config(config), transport, ep_a)
        lib_b = DdsLibrary(_library_config(config), transport, ep_b)
        libs = [lib_a, lib_b]
    else:
        lib_a = lib_b = DdsLibrary(_library_config(config))
        ep_a = ep_b = None
        libs = [lib_a]

    driver, listener, relay = _role(lib_a), _role(lib_a), _role(lib_b)
    ping_a = _topic(driver, "ping", config, qos)
    pong_a = _topic(listener, "pong", config, qos)
    ping_b = _topic(relay, "ping", config, qos)
    pong_b = _topic(relay, "pong", config, qos)
    if transport is not None:
        driver.lib.add_peer(driver.ctx, ping_a, ep_b)
        relay.lib.add_peer(relay.ctx, pong_b, ep_a)

    writer = lib_a.create_writer(driver.ctx, driver.participant, ping_a)
    listen_reader = lib_a.create_reader(listener.ctx, listener.participant, pong_a)
    listen_ws = lib_a.create_waitset(listener.ctx, [listen_reader])
    relay_reader = lib_b.create_reader(relay.ctx, relay.participant, ping_b)
    relay_ws = lib_b.create_waitset(relay.ctx, [relay_reader])
    relay_writer = lib_b.create_writer(relay.ctx, relay.participant, pong_b)

    if transport is not None:
        daemons = [Daemon(lib, daemon_config).start() for lib in libs]

    results: dict[str, object] = {}

    def _run(name: str, fn, *args):
        try:
            results[name] = fn(*args)
        except DomainBusError as e:
            logger.error(f"❌ {name} failed: {e}")
            stop.set()

    roles = {
        "listener": (run_listener, lib_a, listener.ctx, listen_reader, listen_ws, config, stop),
        "relay": (run_relay, lib_b, relay.ctx, relay_reader, relay_ws, relay_writer, config, stop),
        "driver": (run_driver, lib_a, driver.ctx, writer, config, stop),
    }
    threads = [
        threading.Thread(target=_run, args=(name, *args), name=f"bench-{name}")
        for name, args in roles.items()
    ]
    started = time.monotonic_ns()
    logger.info(
        f"🚀 bench {config.sample_len} B @ {config.rate_hz} Hz x {config.count} "
        f"({config.topology.value}, eager={'on' if config.eager_notify else 'off'})"
    )
    for t in threads:
        t.start()
    threads[2].join(config.timeout_s)
    # lost best-effort samples never arrive, so only reliable runs wait out the full timeout
    grace_s = config.timeout_s if config.reliability is Reliability.RELIABLE else 1.0
    threads[0].join(max(0.0, min(grace_s, config.timeout_s - (time.monotonic_ns() - started) / 1e9)))
    stop.set()
    for t in threads:
        t.join(2.0)
    wall_ns = max(1, time.monotonic_ns() - started)
    for d in daemons:
        d.stop()
    if transport is not None:
        transport.close()

    listen_log: ListenerLog = results.get("listener") or ListenerLog()
    send_log = results.get("driver") or []
    if len(listen_log.latencies) < config.count:
        logger.warning(f"⚠️ listener received {len(listen_log.latencies)} of {len(send_log)} samples")
    if listen_log.payload_errors:
        logger.warning(f"⚠️ {listen_log.payload_errors} payloads arrived altered")

    copies = sum(lib.counters["copies"] for lib in libs)
    deliveries = sum(lib.counters["deliveries"] for lib in libs)
    threads_hw = os.cpu_count() or 1
    cpu = {
        name: role.ctx.busy_ns / wall_ns / threads_hw
        for name, role in (("driver", driver), ("relay", relay), ("listener", listener))
    }
    for i, d in enumerate(daemons):
        cpu[f"daemon{i}"] = d.cpu_ns / wall_ns / threads_hw
    seqs = listen_log.sequences
    result = BenchResult(
        size_bytes=config.sample_len,
        rate_hz=config.rate_hz,
        stats=compute_stats(listen_log.latencies, config.trim_fraction) if listen_log.latencies else None,
        sent=len(send_log),
        received=len(listen_log.latencies),
        mode_switches=sum(d.mode_state.switches for d in daemons),
        copies_per_sample=copies / deliveries if deliveries else 0.0,
        cpu_utilization=cpu,
        sequences_in_order=all(a < b for a, b in zip(seqs, seqs[1:])),
    )
    if result.stats is not None:
        logger.info(
            f"✅ {result.received}/{result.sent} samples, trimmed mean "
            f"{result.stats.trimmed_mean / 1000:.1f} µs, p99 {result.stats.p99 / 1000:.1f} µs"
        )
    return result


@dataclass
class EagerComparison:
    on: list[float]
    off: list[float]

    @property
    def reduction(self) -> float:
        """Relative trimmed-mean reduction with eager notification on (0.1 = 10 %)."""
        off = float(np.mean(self.off))
        return (off - float(np.mean(self.on))) / off if off else 0.0


def compare_eager_notify(config: BenchConfig, runs: int = 5) -> EagerComparison:
    """Paired on/off runs, alternating so drift hits both sides equally."""
    comparison = EagerComparison(on=[], off=[])
    for i in range(runs):
        for eager in ((True, False) if i % 2 == 0 else (False, True)):
            config.eager_notify = eager
            result = run_benchmark(config)
            if result.stats is None:
                raise EmptyInput(f"run {i} with eager={eager} received no samples")
            (comparison.on if eager else comparison.off).append(result.stats.trimmed_mean)
    logger.info(f"📊 eager notification reduces trimmed mean by {comparison.reduction:.1%}")
    return comparison
