import logging
import time

import uvicorn
from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel, Field

from . import __version__
from .bench import BenchConfig, compute_stats, run_benchmark
from .daemon import (
    DEFAULT_SWITCH_DOWN_HZ,
    DEFAULT_SWITCH_UP_HZ,
    arrivals_at,
    replay_trace,
    update_mode,
)
from .errors import DomainBusError
from .transport import NetConfig

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

api = FastAPI(title="domainbus", version=__version__)

# request size limits
MAX_BENCH_SAMPLES = 10_000
MAX_TRACE_ARRIVALS = 1_000_000


@api.middleware("http")
async def log_requests(request: Request, call_next):
    start_time = time.time()
    logger.info(f"🌐 INCOMING REQUEST: {request.method} {request.url}")
    response = await call_next(request)
    logger.info(f"✅ RESPONSE: {response.status_code} - {time.time() - start_time:.3f}s")
    return response


class StatsRequest(BaseModel):
    latencies_ns: list[int]
    trim_fraction: float = 0.10


class StatsResponse(BaseModel):
    n: int
    mean_ns: float
    trimmed_mean_ns: float
    p50_ns: int
    p99_ns: int
    min_ns: int
    max_ns: int


class BenchRequest(BaseModel):
    size_bytes: int = 64
    rate_hz: float = 100.0
    count: int = Field(default=100, le=MAX_BENCH_SAMPLES)
    trim_fraction: float = 0.10
    eager_notify: bool = True
    topology: str = "network"
    reliability: str = "reliable"
    loss_prob: float = 0.0
    delay_ns: int = 0
    seed: int = 42
    heartbeat_period_ms: float = 100.0


class BenchResponse(BaseModel):
    sent: int
    received: int
    mode_switches: int
    copies_per_sample: float
    stats: StatsResponse | None
    cpu_utilization: dict[str, float]


class ModeTraceRequest(BaseModel):
    rates_hz: list[float]
    count: int = 512
    switch_up_hz: float = DEFAULT_SWITCH_UP_HZ
    switch_down_hz: float = DEFAULT_SWITCH_DOWN_HZ


class ModeTraceResponse(BaseModel):
    modes: list[str]
    switches: int
    final_rate_hz: float


def _stats_response(stats) -> StatsResponse:
    return StatsResponse(
        n=stats.n,
        mean_ns=stats.mean,
        trimmed_mean_ns=stats.trimmed_mean,
        p50_ns=stats.p50,
        p99_ns=stats.p99,
        min_ns=stats.min,
        max_ns=stats.max,
    )


@api.get("/health")
def health():
    return {"ok": True, "version": __version__}


@api.post("/stats", response_model=StatsResponse)
def stats_endpoint(request: StatsRequest):
    """Trimmed mean and nearest-rank percentiles of posted latencies."""
    try:
        return _stats_response(compute_stats(request.latencies_ns, request.trim_fraction))
    except (DomainBusError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))


@api.post("/bench", response_model=BenchResponse)
def bench_endpoint(request: BenchRequest):
    """Run one small benchmark configuration on the simulated network."""
    try:
        config = BenchConfig(
            sample_len=request.size_bytes,
            rate_hz=request.rate_hz,
            count=request.count,
            trim_fraction=request.trim_fraction,
            eager_notify=request.eager_notify,
            topology=request.topology,
            reliability=request.reliability,
            net=NetConfig(loss_prob=request.loss_prob, delay_ns=request.delay_ns, seed=request.seed),
            heartbeat_period_ns=int(request.heartbeat_period_ms * 1_000_000),
        )
        result = run_benchmark(config)
    except (DomainBusError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"❌ bench failed: {e}")
        raise HTTPException(status_code=500, detail=str(e))
    return BenchResponse(
        sent=result.sent,
        received=result.received,
        mode_switches=result.mode_switches,
        copies_per_sample=result.copies_per_sample,
        stats=_stats_response(result.stats) if result.stats else None,
        cpu_utilization=result.cpu_utilization,
    )


@api.post("/mode-trace", response_model=ModeTraceResponse)
def mode_trace_endpoint(request: ModeTraceRequest):
    """Mode after each segment of a synthetic arrival trace."""
    if not request.rates_hz or not all(0 < r <= 1e9 for r in request.rates_hz):
        raise HTTPException(status_code=400, detail="rates_hz must be non-empty, each in (0, 1e9]")
    if request.count <= 0 or request.count * len(request.rates_hz) > MAX_TRACE_ARRIVALS:
        raise HTTPException(status_code=400, detail=f"trace must hold 1..{MAX_TRACE_ARRIVALS} arrivals")
    if not 0 < request.switch_down_hz <= request.switch_up_hz:
        raise HTTPException(status_code=400, detail="need 0 < switch_down_hz <= switch_up_hz")
    state = replay_trace([], request.switch_up_hz, request.switch_down_hz)
    modes = []
    try:
        for rate in request.rates_hz:
            last = state.last_arrival_ns
            start = last + int(1e9 / rate) if last is not None else 0
            for arrival in arrivals_at(rate, request.count, start):
                update_mode(state, arrival)
            modes.append(state.mode.value)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return ModeTraceResponse(modes=modes, switches=state.switches, final_rate_hz=state.rate_hz)


def serve(host: str = "127.0.0.1", port: int = 8002):
    uvicorn.run(api, host=host, port=port)
