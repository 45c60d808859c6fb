"""
Latency recording, percentiles, normalization and resource accounting.

Percentiles follow P_k = L[ceil(k * n / 100)] with 1-based indexing over the
sorted response times. Bucketed recorders answer with the upper edge of the
bucket holding that index, so they never under-report a tail.
"""

import csv
import logging
import math
import threading
import time
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from hdrh.histogram import HdrHistogram  # type: ignore[import-untyped]

from .exceptions import (
    ConnectFailedError,
    InfoUnavailableError,
    InvalidBaselineError,
    InvalidParameterError,
    KvbenchError,
    NoDataError,
)
from .resp import Connection, connect, fetch_info
from .structs import (
    EfficiencyWeights,
    Endpoint,
    InfoSchema,
    LatencySummary,
    ResourceSample,
    ResourceSource,
)

logger = logging.getLogger()

LOWEST_US = 1.0
HIGHEST_US = 60_000_000.0
NS_PER_US = 1000
# three significant figures bound each bucket width to 0.1% of its lowest value
SIGNIFICANT_FIGURES = 3
MAX_BUCKET_RATIO = 1.001
EXACT_LIMIT = 1_000_000

CPU_SECONDS = "cpu_seconds_total"
USED_MEMORY = "used_memory"

BUILTIN_SCHEMAS: dict[str, InfoSchema] = {
    "redis": InfoSchema(),
    "valkey": InfoSchema(),
    "keydb": InfoSchema(),
    # Garnet reports process memory but no cpu counters in INFO
    "garnet": InfoSchema(
        sections=["memory"],
        cpu_fields=[],
        memory_field="proc_physical_memory_size",
    ),
}


class RecorderMode(str, Enum):
    EXACT = "exact"
    BUCKETED = "bucketed"


def percentile_index(k: float, n: int) -> int:
    """1-based rank ceil(k * n / 100), computed without float rounding."""
    if not (math.isfinite(k) and 0 < k <= 100):
        raise InvalidParameterError(f"percentile must lie in (0, 100], got {k}")
    if n < 1:
        raise NoDataError("no latency samples recorded")
    return math.ceil(Fraction(str(k)) * n / 100)


def to_ns(rtt_us: float) -> int:
    """Round up so a bucket's upper edge never falls below the sample."""
    return math.ceil(rtt_us * NS_PER_US)


def new_histogram() -> HdrHistogram:
    return HdrHistogram(1, to_ns(HIGHEST_US), SIGNIFICANT_FIGURES)


def upper_edge_at_rank(histogram: HdrHistogram, rank: int) -> float:
    """Upper edge, in microseconds, of the bucket holding the 1-based ``rank``."""
    seen = 0
    for index in range(histogram.counts_len):
        seen += histogram.get_count_at_index(index)
        if seen >= rank:
            value = histogram.get_value_from_index(index)
            return float(histogram.get_highest_equivalent_value(value)) / NS_PER_US
    raise NoDataError(f"rank {rank} exceeds the {seen} recorded samples")


class LatencyRecorder:
    """Response times for one worker (single writer), merged after a run.

    Exact mode keeps every sample; once ``exact_limit`` is passed the
    recorder folds itself into an HDR histogram. Bucketed percentiles use
    the same ceiling rank as exact ones and answer with the bucket's upper
    edge, so they never under-report a tail.
    """

    def __init__(
        self,
        mode: RecorderMode = RecorderMode.EXACT,
        exact_limit: Optional[int] = EXACT_LIMIT,
    ) -> None:
        self.mode = mode
        self.exact_limit = exact_limit
        self.count = 0
        self.overflow = 0
        self.total_us = 0.0
        self.max_us = 0.0
        self._samples: list[float] = []
        self._sorted = True
        self._histogram: Optional[HdrHistogram] = None
        if mode is RecorderMode.BUCKETED:
            self._histogram = new_histogram()

    def __repr__(self) -> str:
        return f"<LatencyRecorder mode={self.mode.value} count={self.count}>"

    def _clamp(self, rtt_us: float) -> float:
        if LOWEST_US <= rtt_us <= HIGHEST_US:
            return rtt_us
        self.overflow += 1
        return HIGHEST_US if rtt_us > HIGHEST_US else LOWEST_US

    def record(self, rtt_us: float) -> None:
        rtt_us = self._clamp(rtt_us)
        self.count += 1
        self.total_us += rtt_us
        if rtt_us > self.max_us:
            self.max_us = rtt_us
        if self._histogram is not None:
            self._histogram.record_value(to_ns(rtt_us))
            return
        self._samples.append(rtt_us)
        self._sorted = False
        if self.exact_limit is not None and self.count > self.exact_limit:
            self._fold()

    def record_many(self, values: Iterable[float]) -> None:
        for value in values:
            self.record(float(value))

    @staticmethod
    def _record_samples(histogram: HdrHistogram, samples: Sequence[float]) -> None:
        if not samples:
            return
        ns = np.ceil(np.asarray(samples, dtype=np.float64) * NS_PER_US).astype(np.int64)
        values, counts = np.unique(ns, return_counts=True)
        for value, count in zip(values.tolist(), counts.tolist()):
            histogram.record_value(value, count)

    def _fold(self) -> None:
        histogram = new_histogram()
        self._record_samples(histogram, self._samples)
        self._histogram = histogram
        self._samples = []
        self.mode = RecorderMode.BUCKETED
        logger.debug(f"latency recorder switched to buckets at {self.count} samples")

    def percentile(self, k: float) -> float:
        index = percentile_index(k, self.count)
        if self._histogram is not None:
            return upper_edge_at_rank(self._histogram, index)
        if not self._sorted:
            self._samples.sort()
            self._sorted = True
        return self._samples[index - 1]

    @property
    def mean_us(self) -> Optional[float]:
        return self.total_us / self.count if self.count else None

    def merge(self, other: "LatencyRecorder") -> "LatencyRecorder":
        self.count += other.count
        self.overflow += other.overflow
        self.total_us += other.total_us
        self.max_us = max(self.max_us, other.max_us)
        if self._histogram is None and other._histogram is None:
            self._samples.extend(other._samples)
            self._sorted = False
            if self.exact_limit is not None and self.count > self.exact_limit:
                self._fold()
            return self
        if self._histogram is None:
            self._fold()
        assert self._histogram is not None
        if other._histogram is not None:
            self._histogram.add(other._histogram)
        else:
            self._record_samples(self._histogram, other._samples)
        return self

    @classmethod
    def merged(cls, recorders: Iterable["LatencyRecorder"]) -> "LatencyRecorder":
        result = cls()
        for recorder in recorders:
            result.merge(recorder)
        return result

    def summary(self) -> LatencySummary:
        if not self.count:
            return LatencySummary()
        return LatencySummary(
            count=self.count,
            p50_us=self.percentile(50),
            p99_us=self.percentile(99),
            p999_us=self.percentile(99.9),
            mean_us=self.mean_us,
            max_us=self.max_us,
        )


def normalized_throughput(raw: float, baseline: float) -> float:
    if not baseline > 0:
        raise InvalidBaselineError(f"baseline throughput must be positive, got {baseline}")
    if raw < 0:
        raise InvalidParameterError(f"throughput must be non-negative, got {raw}")
    return raw / baseline


def efficiency_index(
    throughput: float,
    cpu_mean: float,
    mem_mean: float,
    weights: EfficiencyWeights,
) -> float:
    """Throughput per weighted resource unit.

    cpu_mean is in cores; mem_mean is used memory as a fraction of the budget.
    """
    denominator = cpu_mean * weights.cpu_weight + mem_mean * weights.mem_weight
    if not denominator > 0:
        raise InvalidParameterError("weighted resource usage must be positive")
    return throughput / denominator


def load_external_samples(path: Union[str, Path]) -> list[ResourceSample]:
    """CSV with columns timestamp_s, cpu_seconds_total, used_memory_bytes."""
    samples = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            cpu = row.get("cpu_seconds_total") or ""
            mem = row.get("used_memory_bytes") or ""
            missing = [
                name for name, raw in ((CPU_SECONDS, cpu), (USED_MEMORY, mem)) if not raw
            ]
            samples.append(
                ResourceSample(
                    timestamp=float(row["timestamp_s"]),
                    cpu_seconds_total=float(cpu) if cpu else None,
                    used_memory=int(float(mem)) if mem else None,
                    source=ResourceSource.EXTERNAL_FILE,
                    missing=missing,
                )
            )
    return sorted(samples, key=lambda s: s.timestamp)


def _external_at(
    external: Sequence[ResourceSample], timestamp: float
) -> Optional[ResourceSample]:
    chosen = None
    for sample in external:
        if sample.timestamp > timestamp:
            break
        chosen = sample
    return chosen


def sample_resources(
    conn: Connection,
    schema: InfoSchema,
    timestamp: float = 0.0,
    external: Optional[Sequence[ResourceSample]] = None,
) -> ResourceSample:
    """One resource reading from INFO, falling back to the external series."""
    info: dict[str, str] = {}
    try:
        for section in schema.sections:
            info.update(fetch_info(conn, section))
    except InfoUnavailableError as e:
        row = _external_at(external, timestamp) if external else None
        if row is not None:
            return row.model_copy(update={"timestamp": timestamp})
        logger.warning(f"resource sample unavailable: {e}")
        return ResourceSample(timestamp=timestamp, missing=[CPU_SECONDS, USED_MEMORY])

    missing = []
    cpu: Optional[float] = None
    try:
        if schema.cpu_fields:
            cpu = sum(float(info[name]) for name in schema.cpu_fields)
    except (KeyError, ValueError):
        cpu = None
    if cpu is None:
        missing.append(CPU_SECONDS)

    memory: Optional[int] = None
    try:
        memory = int(float(info[schema.memory_field]))
    except (KeyError, ValueError):
        missing.append(USED_MEMORY)

    if missing and external:
        row = _external_at(external, timestamp)
        if row is not None:
            if cpu is None and row.cpu_seconds_total is not None:
                cpu = row.cpu_seconds_total
                missing.remove(CPU_SECONDS)
            if memory is None and row.used_memory is not None:
                memory = row.used_memory
                missing.remove(USED_MEMORY)

    return ResourceSample(
        timestamp=timestamp,
        cpu_seconds_total=cpu,
        used_memory=memory,
        source=ResourceSource.SERVER_INFO,
        missing=missing,
    )


def cpu_mean_cores(series: Sequence[ResourceSample]) -> Optional[float]:
    """(last cpu_seconds_total - first) / elapsed over samples that have cpu."""
    points = [s for s in series if s.cpu_seconds_total is not None]
    if len(points) < 2:
        return None
    first, last = points[0], points[-1]
    elapsed = last.timestamp - first.timestamp
    if elapsed <= 0:
        return None
    assert first.cpu_seconds_total is not None and last.cpu_seconds_total is not None
    cores = (last.cpu_seconds_total - first.cpu_seconds_total) / elapsed
    if cores < 0:
        logger.warning("cpu_seconds_total went backwards; server restarted mid-run?")
        return None
    return cores


def mean_used_memory(series: Sequence[ResourceSample]) -> Optional[float]:
    values = [s.used_memory for s in series if s.used_memory is not None]
    if not values:
        return None
    return float(np.mean(values))


class ResourceSampler:
    """Samples server resources on its own connection until stopped."""

    def __init__(
        self,
        endpoint: Endpoint,
        schema: InfoSchema,
        interval: float = 5.0,
        origin: Optional[float] = None,
        delay: float = 0.0,
    ) -> None:
        self.endpoint = endpoint
        self.delay = delay
        self.schema = schema
        self.interval = interval
        self.origin = origin if origin is not None else time.monotonic()
        self.samples: list[ResourceSample] = []
        self.external: list[ResourceSample] = []
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._conn: Optional[Connection] = None
        if schema.external_file:
            try:
                self.external = load_external_samples(schema.external_file)
            except (OSError, ValueError, KeyError) as e:
                logger.warning(f"could not read {schema.external_file}: {e}")

    def _sample(self) -> None:
        now = time.monotonic() - self.origin
        if self._conn is None or not self._conn.usable:
            row = _external_at(self.external, now)
            if row is not None:
                self.samples.append(row.model_copy(update={"timestamp": now}))
            return
        try:
            self.samples.append(
                sample_resources(self._conn, self.schema, now, self.external)
            )
        except KvbenchError as e:
            logger.warning(f"resource sampling on {self.endpoint} failed: {e}")

    def _loop(self) -> None:
        if self.delay > 0 and self._stop.wait(self.delay):
            return
        self._sample()
        while not self._stop.wait(self.interval):
            self._sample()

    def start(self) -> "ResourceSampler":
        try:
            self._conn = connect(self.endpoint)
        except ConnectFailedError as e:
            logger.warning(f"resource sampler could not connect to {self.endpoint}: {e}")
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list[ResourceSample]:
        self._stop.set()
        if self._thread:
            self._thread.join()
        self._sample()
        if self._conn:
            self._conn.close()
        return self.samples
