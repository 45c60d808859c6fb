import os

import pytest

from kvbench.mock_server import MockRespServer
from kvbench.structs import RunResult, WorkloadSpec
from kvbench.zipf import rank_to_key


def get_fixtures_dir():
    conftest_dir = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(conftest_dir, "fixtures")


@pytest.fixture(autouse=True)
def clean_kvbench_env(monkeypatch):
    for name in list(os.environ):
        if name.startswith("KVBENCH_"):
            monkeypatch.delenv(name, raising=False)


@pytest.fixture
def fixtures_dir():
    return get_fixtures_dir()


@pytest.fixture
def mock_server():
    with MockRespServer() as server:
        yield server


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    directory = tmp_path / "results"
    monkeypatch.setenv("KVBENCH_OUTPUT", str(directory))
    return directory


@pytest.fixture
def tiny_spec():
    def make(**overrides):
        fields = dict(
            name="tiny",
            set_ratio=0.05,
            get_ratio=0.95,
            skew=1.4,
            key_count=200,
            value_size=32,
            duration=1.0,
            warmup=0.2,
            concurrency_levels=[1, 2],
            pipeline_depth=1,
            base_seed=7,
            cooldown=0.0,
        )
        fields.update(overrides)
        return WorkloadSpec(**fields)

    return make


@pytest.fixture
def make_result():
    def make(system="redis", throughput=1000.0, concurrency=50, repetition=1, **overrides):
        fields = dict(
            system=system,
            workload="A",
            set_ratio=0.5,
            concurrency=concurrency,
            repetition=repetition,
            ops_total=int(throughput * 10),
            elapsed_measured=10.0,
            throughput=int(throughput * 10) / 10.0,
            p50_us=100.0,
            p99_us=900.0,
            p999_us=2000.0,
            cpu_mean_cores=1.0,
            mem_mean_bytes=float(1 << 30),
        )
        fields.update(overrides)
        return RunResult(**fields)

    return make


@pytest.fixture
def fill_mock():
    """Fill a mock server directly with the key space of a workload."""

    def fill(server, spec):
        mapping = spec.key_mapping
        for rank in range(1, spec.key_count + 1):
            server.store[rank_to_key(mapping, rank)] = b"v" * spec.value_size

    return fill
