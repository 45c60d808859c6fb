from dotenv import load_dotenv

from .exceptions import (
    ConfigError,
    ConnectFailedError,
    InvalidParameterError,
    KvbenchError,
    NoDataError,
    PreloadError,
    ProtocolDesyncError,
)
from .metrics import LatencyRecorder, efficiency_index, normalized_throughput
from .recorder import ResultStore
from .resp import Command, CommandBatch, Connection, Reply, connect
from .stats import compare_cells, t_cdf, welch_test
from .structs import BenchmarkConfig, Endpoint, RunResult, WorkloadSpec
from .workload import builtin_workload, compute_preload_keycount, preload, run, sweep
from .zipf import ZipfianParams, build_table, sample_rank, sample_stream

load_dotenv()

__all__ = [
    "BenchmarkConfig",
    "Command",
    "CommandBatch",
    "ConfigError",
    "ConnectFailedError",
    "Connection",
    "Endpoint",
    "InvalidParameterError",
    "KvbenchError",
    "LatencyRecorder",
    "NoDataError",
    "PreloadError",
    "ProtocolDesyncError",
    "Reply",
    "ResultStore",
    "RunResult",
    "WorkloadSpec",
    "ZipfianParams",
    "build_table",
    "builtin_workload",
    "compare_cells",
    "compute_preload_keycount",
    "connect",
    "efficiency_index",
    "normalized_throughput",
    "preload",
    "run",
    "sample_rank",
    "sample_stream",
    "sweep",
    "t_cdf",
    "welch_test",
]
