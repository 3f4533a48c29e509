import logging
import sys
from pathlib import Path

import click

from .bench import BenchConfig, Topology, compare_eager_notify, emit_csv, run_benchmark
from .buffers import DEFAULT_REGION_SIZE, GRANULE_SIZE
from .daemon import (
    DEFAULT_SWITCH_DOWN_HZ,
    DEFAULT_SWITCH_UP_HZ,
    ForceMode,
    arrivals_at,
    replay_trace,
    update_mode,
)
from .dds import Reliability
from .errors import DomainBusError
from .runtime import DEFAULT_MAX_CALL_NS, TimeBoundPolicy, ViolationAction
from .transport import NetConfig, TransportKind

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _choice(enum_cls) -> click.Choice:
    return click.Choice([member.value for member in enum_cls])


_BENCH_OPTIONS = [
    click.option("--size", "sizes", type=int, multiple=True, default=(64,), show_default=True,
                 help="Sample size in bytes (repeat for several configurations)."),
    click.option("--rate", "rates", type=float, multiple=True, default=(100.0,), show_default=True,
                 help="Send rate in Hz (repeat for several configurations)."),
    click.option("--count", type=int, default=1000, show_default=True, help="Samples per run."),
    click.option("--trim", type=float, default=0.10, show_default=True,
                 help="Fraction of worst latencies dropped from the trimmed mean."),
    click.option("--eager-notify", type=click.Choice(["on", "off"]), default="on", show_default=True),
    click.option("--topology", type=_choice(Topology), default="network", show_default=True),
    click.option("--reliability", type=_choice(Reliability), default="reliable", show_default=True),
    click.option("--transport", type=_choice(TransportKind), default="sim", show_default=True),
    click.option("--loss", type=float, default=0.0, show_default=True, help="Simulated loss probability."),
    click.option("--delay-ns", type=int, default=0, show_default=True, help="Simulated one-way delay."),
    click.option("--jitter-ns", type=int, default=0, show_default=True),
    click.option("--reorder", type=float, default=0.0, show_default=True,
                 help="Probability that a datagram is held back and overtaken."),
    click.option("--seed", type=int, default=42, show_default=True),
    click.option("--wake-cost-ns", type=int, default=5000, show_default=True,
                 help="Simulated cost of waking a blocked thread."),
    click.option("--heartbeat-period-ms", type=float, default=1000.0, show_default=True),
    click.option("--mode-up-hz", type=float, default=DEFAULT_SWITCH_UP_HZ, show_default=True),
    click.option("--mode-down-hz", type=float, default=DEFAULT_SWITCH_DOWN_HZ, show_default=True),
    click.option("--force-mode", type=_choice(ForceMode), default="auto", show_default=True),
    click.option("--time-bound-ns", type=int, default=DEFAULT_MAX_CALL_NS, show_default=True),
    click.option("--bound-policy", type=_choice(ViolationAction), default="record", show_default=True),
    click.option("--heap-slots-per-kind", type=int, default=4096, show_default=True),
    click.option("--region-size", type=int, default=DEFAULT_REGION_SIZE, show_default=True),
    click.option("--region-limit", type=int, default=None, help="Defaults to 4x the region size."),
    click.option("--granule-size", type=int, default=GRANULE_SIZE, show_default=True),
    click.option("--csv", "csv_path", type=click.Path(dir_okay=False, path_type=Path),
                 help="Write one CSV row per configuration."),
]


def bench_options(fn):
    for option in reversed(_BENCH_OPTIONS):
        fn = option(fn)
    return fn


def _bench_config(size: int, rate: float, opts: dict) -> BenchConfig:
    net = NetConfig(
        loss_prob=opts["loss"],
        delay_ns=opts["delay_ns"],
        jitter_ns=opts["jitter_ns"],
        reorder_prob=opts["reorder"],
        seed=opts["seed"],
        wake_cost_ns=opts["wake_cost_ns"],
        transport=opts["transport"],
    )
    return BenchConfig(
        sample_len=size,
        rate_hz=rate,
        count=opts["count"],
        trim_fraction=opts["trim"],
        eager_notify=opts["eager_notify"] == "on",
        net=net,
        force_mode=opts["force_mode"],
        topology=opts["topology"],
        reliability=opts["reliability"],
        heartbeat_period_ns=int(opts["heartbeat_period_ms"] * 1_000_000),
        switch_up_hz=opts["mode_up_hz"],
        switch_down_hz=opts["mode_down_hz"],
        wake_cost_ns=opts["wake_cost_ns"],
        region_size=opts["region_size"],
        region_limit=opts["region_limit"],
        granule_size=opts["granule_size"],
        heap_slots_per_kind=opts["heap_slots_per_kind"],
        time_bound=TimeBoundPolicy(opts["time_bound_ns"], opts["bound_policy"]),
    )


def _echo_result(result) -> None:
    stats = result.stats
    click.echo(f"📦 {result.size_bytes} B @ {result.rate_hz:g} Hz: {result.received}/{result.sent} received")
    if stats is None:
        click.echo("   no samples arrived")
        return
    click.echo(
        f"   mean {stats.mean / 1000:.1f} µs, trimmed {stats.trimmed_mean / 1000:.1f} µs, "
        f"p50 {stats.p50 / 1000:.1f} µs, p99 {stats.p99 / 1000:.1f} µs"
    )
    click.echo(
        f"   mode switches {result.mode_switches}, copies/sample {result.copies_per_sample:.2f}"
    )
    if result.cpu_utilization:
        usage = ", ".join(f"{k} {v:.2%}" for k, v in result.cpu_utilization.items())
        click.echo(f"   cpu {usage}")


@click.group()
def app() -> None:
    """domainbus: protected-library publish/subscribe middleware and its benchmark."""
    pass


@click.command("bench")
@bench_options
def bench(sizes: tuple[int, ...], rates: tuple[float, ...], csv_path: Path | None, **opts) -> None:
    """
    Run the driver/relay/listener latency benchmark.

    Examples:
        domainbus bench --size 64 --size 1024 --rate 100 --count 500 --csv out.csv
        domainbus-bench --transport sim --loss 0.1 --seed 7 --heartbeat-period-ms 20
    """
    results = []
    try:
        for size in sizes:
            for rate in rates:
                result = run_benchmark(_bench_config(size, rate, opts))
                _echo_result(result)
                results.append(result)
        if csv_path is not None:
            emit_csv(results, str(csv_path))
            click.echo(f"Saved: {csv_path}")
    except (DomainBusError, ValueError) as e:
        raise click.ClickException(str(e)) from e


@click.command("ab")
@bench_options
@click.option("--runs", type=int, default=5, show_default=True, help="Paired on/off runs.")
def ab(sizes: tuple[int, ...], rates: tuple[float, ...], csv_path: Path | None, runs: int, **opts) -> None:
    """
    Compare trimmed-mean latency with eager notification on and off.

    Examples:
        domainbus ab --rate 10 --count 100 --wake-cost-ns 5000 --runs 5
    """
    try:
        config = _bench_config(sizes[0], rates[0], opts)
        comparison = compare_eager_notify(config, runs=runs)
    except (DomainBusError, ValueError) as e:
        raise click.ClickException(str(e)) from e
    for i, (on, off) in enumerate(zip(comparison.on, comparison.off), 1):
        click.echo(f"   run {i}: on {on / 1000:.1f} µs, off {off / 1000:.1f} µs")
    click.echo(f"📊 eager notification reduces trimmed mean by {comparison.reduction:.1%}")


@click.command("mode-trace")
@click.option("--rate", "rates", type=float, multiple=True, required=True,
              help="Arrival rate in Hz of one trace segment (repeat for a ramp).")
@click.option("--count", type=int, default=512, show_default=True, help="Arrivals per segment.")
@click.option("--mode-up-hz", type=float, default=DEFAULT_SWITCH_UP_HZ, show_default=True)
@click.option("--mode-down-hz", type=float, default=DEFAULT_SWITCH_DOWN_HZ, show_default=True)
def mode_trace(rates: tuple[float, ...], count: int, mode_up_hz: float, mode_down_hz: float) -> None:
    """
    Feed a synthetic arrival trace to the daemon's mode switch and report the outcome.

    Examples:
        domainbus mode-trace --rate 100 --rate 12000 --rate 340000
    """
    try:
        state = replay_trace([], mode_up_hz, mode_down_hz)
        for rate in rates:
            start = state.last_arrival_ns + int(1e9 / rate) if state.last_arrival_ns is not None else 0
            for arrival in arrivals_at(rate, count, start):
                update_mode(state, arrival)
            click.echo(f"   {rate:>10g} Hz -> {state.mode.value} (estimate {state.rate_hz:.0f} Hz)")
    except ValueError as e:
        raise click.ClickException(str(e)) from e
    click.echo(f"🔁 final mode {state.mode.value}, {state.switches} switches")


@click.command("serve")
@click.option("--host", default="0.0.0.0", show_default=True)
@click.option("--port", type=int, default=8002, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP status and benchmark API."""
    from .api import serve as serve_api

    serve_api(host=host, port=port)


for _command in (bench, ab, mode_trace, serve):
    app.add_command(_command)


if __name__ == "__main__":
    try:
        app()
    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)
