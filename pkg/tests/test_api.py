"""
Tests for the HTTP status and benchmark API.
"""

from unittest.mock import patch

import pytest

from domainbus import __version__
from domainbus.bench import BenchResult, compute_stats
from domainbus.errors import BackpressureFull


@pytest.mark.unit
class TestHealthEndpoint:
    """Test the health check."""

    def test_health(self, api_client):
        response = api_client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"ok": True, "version": __version__}


@pytest.mark.unit
class TestStatsEndpoint:
    """Test latency statistics over posted samples."""

    def test_trimmed_mean(self, api_client):
        latencies = [us * 1000 for us in (1, 2, 3, 4, 5, 6, 7, 8, 9, 1000)]
        response = api_client.post("/stats", json={"latencies_ns": latencies})

        assert response.status_code == 200
        data = response.json()
        assert data["trimmed_mean_ns"] == 5000
        assert data["p99_ns"] == 1_000_000
        assert data["n"] == 10
        assert data["min_ns"] == 1000

    def test_custom_trim(self, api_client):
        response = api_client.post("/stats", json={"latencies_ns": [10, 20, 30], "trim_fraction": 0.0})
        assert response.json()["trimmed_mean_ns"] == 20

    def test_empty_input(self, api_client):
        response = api_client.post("/stats", json={"latencies_ns": []})
        assert response.status_code == 400

    def test_bad_trim(self, api_client):
        response = api_client.post("/stats", json={"latencies_ns": [1, 2], "trim_fraction": 1.5})
        assert response.status_code == 400

    def test_missing_field(self, api_client):
        response = api_client.post("/stats", json={})
        assert response.status_code == 422


@pytest.mark.unit
class TestBenchEndpoint:
    """Test the benchmark endpoint with the runner mocked."""

    def result(self):
        return BenchResult(
            size_bytes=64,
            rate_hz=100.0,
            stats=compute_stats([1000, 2000, 3000]),
            sent=3,
            received=3,
            mode_switches=0,
            copies_per_sample=1.0,
            cpu_utilization={"driver": 0.5},
        )

    def test_success(self, api_client):
        with patch("domainbus.api.run_benchmark", return_value=self.result()) as mock_run:
            response = api_client.post("/bench", json={"count": 3, "loss_prob": 0.1})

        assert response.status_code == 200
        data = response.json()
        assert data["sent"] == data["received"] == 3
        assert data["stats"]["p50_ns"] == 2000
        assert data["cpu_utilization"] == {"driver": 0.5}
        config = mock_run.call_args.args[0]
        assert config.count == 3
        assert config.net.loss_prob == 0.1
        assert config.heartbeat_period_ns == 100_000_000

    def test_invalid_config(self, api_client):
        response = api_client.post("/bench", json={"rate_hz": 0})
        assert response.status_code == 400

    def test_bad_topology(self, api_client):
        response = api_client.post("/bench", json={"topology": "mesh"})
        assert response.status_code == 400

    def test_count_limit(self, api_client):
        response = api_client.post("/bench", json={"count": 10_001})
        assert response.status_code == 422

    def test_library_error(self, api_client):
        with patch("domainbus.api.run_benchmark", side_effect=BackpressureFull("window full")):
            response = api_client.post("/bench", json={})
        assert response.status_code == 400
        assert "window full" in response.json()["detail"]

    def test_unexpected_error(self, api_client):
        with patch("domainbus.api.run_benchmark", side_effect=RuntimeError("boom")):
            response = api_client.post("/bench", json={})
        assert response.status_code == 500

    @pytest.mark.integration
    def test_real_local_run(self, api_client):
        response = api_client.post("/bench", json={"count": 10, "rate_hz": 500, "topology": "local"})
        assert response.status_code == 200
        assert response.json()["received"] == 10


@pytest.mark.unit
class TestModeTraceEndpoint:
    """Test the mode switch replay endpoint."""

    def test_ramp(self, api_client):
        response = api_client.post("/mode-trace", json={"rates_hz": [100, 12_000, 340_000]})

        assert response.status_code == 200
        data = response.json()
        assert data["modes"] == ["event", "poll", "poll"]
        assert data["switches"] == 1
        assert data["final_rate_hz"] == pytest.approx(340_000, rel=0.02)

    def test_hysteresis(self, api_client):
        response = api_client.post("/mode-trace", json={"rates_hz": [12_000, 7_000, 3_000]})
        assert response.json()["modes"] == ["poll", "poll", "event"]

    @pytest.mark.parametrize(
        "body",
        [
            {"rates_hz": []},
            {"rates_hz": [0]},
            {"rates_hz": [100], "count": 0},
            {"rates_hz": [100], "switch_up_hz": 100, "switch_down_hz": 200},
        ],
    )
    def test_rejects(self, api_client, body):
        response = api_client.post("/mode-trace", json=body)
        assert response.status_code == 400
