"""
Workload definitions, memory-pressure preloading and timed benchmark runs.

A run is closed-loop: every worker owns one connection, sends a batch of
``pipeline_depth`` commands and waits for all replies before the next one.
Warmup is part of ``duration``; only operations that complete inside
[warmup, duration) count towards latency and throughput.
"""

import contextlib
import functools
import logging
import math
import queue
import threading
import time
from datetime import datetime, timezone
from enum import Enum
from fractions import Fraction
from threading import Thread
from typing import Callable, Iterator, Optional

from .exceptions import (
    ConnectFailedError,
    InfoUnavailableError,
    InvalidParameterError,
    KvbenchError,
    PreloadError,
    ProtocolDesyncError,
)
from .metrics import (
    LatencyRecorder,
    ResourceSampler,
    cpu_mean_cores,
    mean_used_memory,
)
from .resp import (
    Command,
    CommandBatch,
    CommandKind,
    Connection,
    ReplyKind,
    connect,
    fetch_info,
    keyspace_keys,
)
from .structs import (
    Endpoint,
    InfoSchema,
    KeyMapping,
    LatencySummary,
    PreloadPlan,
    PreloadReport,
    RunResult,
    SeedRecord,
    WorkloadSpec,
)
from .zipf import (
    RankStream,
    SplitMix64,
    ZipfianParams,
    ZipfianTable,
    build_table,
    derive_seed,
    rank_to_key,
)

logger = logging.getLogger()

GIB = 1 << 30
DEFAULT_MEMORY_BUDGET = 8 * GIB
DEFAULT_TARGET_FILL = 0.75
DEFAULT_VALUE_SIZE = 1024
DEFAULT_OVERHEAD_PER_KEY = 300
ROUNDED_KEY_COUNT = 4_800_000
DEFAULT_CONCURRENCY = list(range(50, 501, 50))
DEFAULT_DURATION = 300.0
DEFAULT_WARMUP = 60.0
DEFAULT_REPETITIONS = 5

MAX_ERROR_RATE = 0.01
MIN_SURVIVING_CONNECTIONS = 0.9

PRELOAD_BATCH = 1000

KEY_STREAM = 0
OP_STREAM = 1
VALUE_STREAM = 2


def compute_preload_keycount(
    memory_budget: int,
    target_fill: float,
    value_size: int,
    overhead: int,
) -> int:
    """floor(memory_budget * target_fill / (value_size + overhead))"""
    if memory_budget <= 0 or value_size <= 0 or overhead <= 0:
        raise InvalidParameterError("memory budget, value size and overhead must be positive")
    if not 0 < target_fill <= 1:
        raise InvalidParameterError(f"target_fill must lie in (0, 1], got {target_fill}")
    return math.floor(
        memory_budget * Fraction(str(target_fill)) / (value_size + overhead)
    )


def plan_preload(
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    target_fill: float = DEFAULT_TARGET_FILL,
    value_size: int = DEFAULT_VALUE_SIZE,
    overhead_per_key: int = DEFAULT_OVERHEAD_PER_KEY,
) -> PreloadPlan:
    compute_preload_keycount(memory_budget, target_fill, value_size, overhead_per_key)
    return PreloadPlan(
        memory_budget=memory_budget,
        target_fill=target_fill,
        value_size=value_size,
        overhead_per_key=overhead_per_key,
    )


DEFAULT_KEY_COUNT = compute_preload_keycount(
    DEFAULT_MEMORY_BUDGET, DEFAULT_TARGET_FILL, DEFAULT_VALUE_SIZE, DEFAULT_OVERHEAD_PER_KEY
)

BUILTIN_MIXES = {
    "A": (0.5, 0.5, 0.9),
    "B": (0.05, 0.95, 1.4),
}


def builtin_workload(name: str) -> WorkloadSpec:
    """A is write-heavy (50/50, skew 0.9); B is read-heavy (5/95, skew 1.4)."""
    try:
        set_ratio, get_ratio, skew = BUILTIN_MIXES[name.upper()]
    except KeyError:
        raise InvalidParameterError(
            f"unknown workload '{name}' (builtin: {', '.join(BUILTIN_MIXES)})"
        )
    return WorkloadSpec(
        name=name.upper(),
        set_ratio=set_ratio,
        get_ratio=get_ratio,
        skew=skew,
        key_count=DEFAULT_KEY_COUNT,
        value_size=DEFAULT_VALUE_SIZE,
        duration=DEFAULT_DURATION,
        warmup=DEFAULT_WARMUP,
        concurrency_levels=DEFAULT_CONCURRENCY,
    )


def make_value(seed: int, size: int) -> bytes:
    """Printable ASCII payload of ``size`` bytes, fixed by ``seed``."""
    if size < 1:
        raise InvalidParameterError("value size must be positive")
    raw = SplitMix64(seed).block(size) % 94 + 33
    return raw.astype("uint8").tobytes()


def _merge_ranges(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for lo, hi in sorted(ranges):
        if merged and lo <= merged[-1][1] + 1:
            merged[-1] = (merged[-1][0], max(hi, merged[-1][1]))
        else:
            merged.append((lo, hi))
    return merged


class _PreloadProgress:
    def __init__(self, label: str, total: int) -> None:
        self.label = label
        self.total = total
        self.issued = 0
        self.errors = 0
        self.completed: list[tuple[int, int]] = []
        self.remaining: list[tuple[int, int]] = []
        self.failure: Optional[str] = None
        self.started = time.monotonic()
        self._next_report = 0.1
        self._lock = threading.Lock()

    def done(self, lo: int, hi: int, errors: int) -> None:
        with self._lock:
            self.issued += hi - lo + 1
            self.errors += errors
            self.completed.append((lo, hi))
            if self.issued >= self._next_report * self.total:
                self._next_report += 0.1
                logger.info(
                    f"preload target={self.label} done={self.issued}/{self.total} "
                    f"elapsed={time.monotonic() - self.started:.1f}s"
                )

    def abandon(self, lo: int, hi: int, reason: str) -> None:
        with self._lock:
            self.remaining.append((lo, hi))
            self.failure = self.failure or reason


def _preload_worker(
    endpoint: Endpoint,
    mapping: KeyMapping,
    value: bytes,
    ranges: "queue.Queue[tuple[int, int]]",
    progress: _PreloadProgress,
) -> None:
    conn: Optional[Connection] = None
    reason = "connection lost"
    try:
        conn = connect(endpoint)
    except ConnectFailedError as e:
        reason = str(e)
    with conn if conn else contextlib.nullcontext():
        while True:
            try:
                lo, hi = ranges.get_nowait()
            except queue.Empty:
                return
            if conn is None or not conn.usable:
                progress.abandon(lo, hi, reason)
                continue
            batch = CommandBatch(
                [Command.set(rank_to_key(mapping, r), value) for r in range(lo, hi + 1)],
                max_depth=hi - lo + 1,
            )
            try:
                replies = conn.execute_batch(batch)
            except (ConnectFailedError, ProtocolDesyncError) as e:
                reason = str(e)
                progress.abandon(lo, hi, reason)
                continue
            progress.done(lo, hi, sum(1 for r in replies if r.is_error))


def preload(
    endpoint: Endpoint,
    plan: PreloadPlan,
    mapping: KeyMapping,
    parallelism: int = 8,
    value_seed: int = 0,
    ranks: Optional[list[tuple[int, int]]] = None,
    label: Optional[str] = None,
) -> PreloadReport:
    """SET every rank 1..key_count exactly once, pipelined over parallel connections.

    ``ranks`` restricts the load to the given inclusive ranges, which is how a
    load interrupted by a PreloadError is resumed.
    """
    if parallelism < 1:
        raise InvalidParameterError("parallelism must be >= 1")
    key_count = plan.key_count
    if key_count != mapping.key_count:
        raise InvalidParameterError(
            f"plan sizes {key_count} keys but the key mapping covers {mapping.key_count}"
        )
    label = label or str(endpoint)

    # fail fast on an unreachable target
    connect(endpoint).close()

    pending: "queue.Queue[tuple[int, int]]" = queue.Queue()
    for lo, hi in _merge_ranges(ranks or [(1, key_count)]):
        for start in range(lo, hi + 1, PRELOAD_BATCH):
            pending.put((start, min(start + PRELOAD_BATCH - 1, hi)))
    batches = pending.qsize()
    progress = _PreloadProgress(label, sum(hi - lo + 1 for lo, hi in list(pending.queue)))
    value = make_value(value_seed, plan.value_size)
    logger.info(
        f"preload target={label} keys={key_count} batches={batches} parallelism={parallelism}"
    )

    threads = [
        Thread(
            target=_preload_worker,
            args=(endpoint, mapping, value, pending, progress),
            daemon=True,
        )
        for _ in range(parallelism)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    elapsed = time.monotonic() - progress.started
    if progress.remaining:
        raise PreloadError(
            f"preload of {label} stopped after {progress.issued} keys: {progress.failure}",
            completed=_merge_ranges(progress.completed),
            remaining=_merge_ranges(progress.remaining),
        )

    used_memory: Optional[int] = None
    try:
        with connect(endpoint) as conn:
            used_memory = int(fetch_info(conn, "memory").get("used_memory", "0")) or None
    except (KvbenchError, ValueError) as e:
        logger.warning(f"could not read used_memory after preload: {e}")

    report = PreloadReport(
        key_count=progress.total,
        issued=progress.issued,
        errors=progress.errors,
        elapsed=elapsed,
        used_memory=used_memory,
    )
    if report.failed:
        logger.warning(
            f"preload target={label} finished with {report.errors} error replies"
        )
    else:
        logger.info(
            f"preload target={label} done={report.issued}/{report.key_count} "
            f"elapsed={elapsed:.1f}s used_memory={used_memory}"
        )
    return report


class RunState(str, Enum):
    WARMING = "warming"
    MEASURING = "measuring"
    DRAINING = "draining"
    DONE = "done"
    ABORTED = "aborted"


_RUN_ORDER = [RunState.WARMING, RunState.MEASURING, RunState.DRAINING, RunState.DONE]


class RunHandle:
    """Lifecycle of one run; states only move forward."""

    def __init__(self, spec: WorkloadSpec, concurrency: int) -> None:
        self.spec = spec
        self.concurrency = concurrency
        self.started_at = datetime.now(timezone.utc).isoformat()
        self.state = RunState.WARMING

    def advance(self, state: RunState) -> None:
        if self.state in (RunState.DONE, RunState.ABORTED):
            raise InvalidParameterError(f"run already {self.state.value}")
        if state is not RunState.ABORTED and (
            _RUN_ORDER.index(state) <= _RUN_ORDER.index(self.state)
        ):
            raise InvalidParameterError(
                f"cannot move from {self.state.value} to {state.value}"
            )
        logger.debug(f"run c={self.concurrency} {self.state.value} -> {state.value}")
        self.state = state

    def __repr__(self) -> str:
        return f"<RunHandle {self.spec.name} c={self.concurrency} {self.state.value}>"


class OpStream:
    """Per-worker SET/GET choices, independent of the key stream."""

    def __init__(self, set_ratio: float, seed: int, chunk: int = 4096) -> None:
        self.set_ratio = set_ratio
        self.rng = SplitMix64(seed)
        self.chunk = chunk
        self._buffer: list[bool] = []
        self._pos = 0

    def __iter__(self) -> Iterator[bool]:
        return self

    def __next__(self) -> bool:
        if self._pos >= len(self._buffer):
            self._buffer = (self.rng.doubles(self.chunk) < self.set_ratio).tolist()
            self._pos = 0
        is_set = self._buffer[self._pos]
        self._pos += 1
        return is_set


@functools.lru_cache(maxsize=4)
def zipfian_table(key_count: int, skew: float) -> ZipfianTable:
    return build_table(ZipfianParams(key_count, skew))


def worker_seeds(run_seed: int, worker: int) -> tuple[int, int]:
    return derive_seed(run_seed, worker, KEY_STREAM), derive_seed(run_seed, worker, OP_STREAM)


class Worker:
    """One closed-loop client on its own connection."""

    def __init__(
        self,
        index: int,
        conn: Connection,
        spec: WorkloadSpec,
        table: ZipfianTable,
        run_seed: int,
        value: bytes,
    ) -> None:
        self.index = index
        self.conn = conn
        self.spec = spec
        self.mapping = spec.key_mapping
        key_seed, op_seed = worker_seeds(run_seed, index)
        self.ranks = RankStream(table, key_seed)
        self.ops = OpStream(spec.set_ratio, op_seed)
        self.value = value
        self.recorders = {
            CommandKind.GET: LatencyRecorder(),
            CommandKind.SET: LatencyRecorder(),
        }
        self.op_counts = {CommandKind.GET: 0, CommandKind.SET: 0}
        self.ops_measured = 0
        self.errors_measured = 0
        self.get_misses = 0
        self.warmup_ops = 0
        self.ramp: list[int] = []
        self.dropped: Optional[str] = None

    def next_batch(self) -> CommandBatch:
        commands = []
        for _ in range(self.spec.pipeline_depth):
            key = rank_to_key(self.mapping, next(self.ranks))
            if next(self.ops):
                commands.append(Command.set(key, self.value))
            else:
                commands.append(Command.get(key))
        return CommandBatch(commands, self.spec.pipeline_depth)

    def main(self, origin: float, stop: threading.Event) -> None:
        measure_start = origin + self.spec.warmup
        end = origin + self.spec.duration
        while not stop.is_set() and time.monotonic() < end:
            batch = self.next_batch()
            try:
                replies = self.conn.execute_batch(batch)
            except (ConnectFailedError, ProtocolDesyncError) as e:
                self.dropped = str(e)
                logger.warning(f"worker {self.index} dropped its connection: {e}")
                return
            completed = time.monotonic()
            if completed >= end:
                return
            second = int(completed - origin)
            while len(self.ramp) <= second:
                self.ramp.append(0)
            self.ramp[second] += len(replies)
            if completed < measure_start:
                self.warmup_ops += len(replies)
                continue
            for command, reply in zip(batch.entries, replies):
                self.ops_measured += 1
                self.op_counts[command.kind] += 1
                if reply.is_error:
                    self.errors_measured += 1
                    continue
                if command.kind is CommandKind.GET and reply.kind is ReplyKind.NIL:
                    self.get_misses += 1
                self.recorders[command.kind].record(reply.rtt_us)


def _check_residency(conn: Connection, spec: WorkloadSpec) -> None:
    try:
        resident = keyspace_keys(conn)
    except InfoUnavailableError as e:
        logger.debug(f"keyspace check skipped: {e}")
        return
    if resident < spec.key_count:
        logger.warning(
            f"only {resident} of {spec.key_count} keys resident; eviction suspected"
        )


def _sum_ramp(workers: list[Worker]) -> list[int]:
    length = max((len(w.ramp) for w in workers), default=0)
    return [sum(w.ramp[i] for w in workers if i < len(w.ramp)) for i in range(length)]


def run(
    endpoint: Endpoint,
    spec: WorkloadSpec,
    concurrency: int,
    system: str = "unknown",
    repetition: int = 1,
    run_seed: Optional[int] = None,
    schema: Optional[InfoSchema] = None,
    resource_interval: float = 5.0,
) -> RunResult:
    """One timed run at ``concurrency`` connections."""
    if concurrency < 1:
        raise InvalidParameterError("concurrency must be >= 1")
    run_seed = spec.base_seed if run_seed is None else run_seed
    table = zipfian_table(spec.key_count, spec.skew)
    value_seed = derive_seed(run_seed, 0, VALUE_STREAM)
    value = make_value(value_seed, spec.value_size)

    with connect(endpoint) as control:
        if not control.ping():
            raise ConnectFailedError(f"{endpoint} did not answer PING")
        _check_residency(control, spec)

    conns: list[Connection] = []
    refused = 0
    for _ in range(concurrency):
        try:
            conns.append(connect(endpoint))
        except ConnectFailedError as e:
            refused += 1
            logger.warning(f"connection to {endpoint} failed: {e}")
    if not conns:
        raise ConnectFailedError(f"no connection to {endpoint} could be opened")

    workers = [
        Worker(i, conn, spec, table, run_seed, value) for i, conn in enumerate(conns)
    ]
    handle = RunHandle(spec, concurrency)
    logger.info(
        f"run system={system} workload={spec.name} concurrency={concurrency} "
        f"rep={repetition} seed={run_seed}"
    )

    stop = threading.Event()
    origin = time.monotonic()
    sampler = ResourceSampler(
        endpoint, schema or InfoSchema(), resource_interval, origin=origin, delay=spec.warmup
    ).start()
    threads = [Thread(target=w.main, args=(origin, stop), daemon=True) for w in workers]
    for t in threads:
        t.start()

    time.sleep(max(0.0, origin + spec.warmup - time.monotonic()))
    handle.advance(RunState.MEASURING)
    time.sleep(max(0.0, origin + spec.duration - time.monotonic()))
    handle.advance(RunState.DRAINING)
    series = sampler.stop()
    for t in threads:
        t.join()
    for conn in conns:
        conn.close()

    dropped = refused + sum(1 for w in workers if w.dropped)
    failure: Optional[str] = None
    if concurrency - dropped < MIN_SURVIVING_CONNECTIONS * concurrency:
        handle.advance(RunState.ABORTED)
        failure = f"only {concurrency - dropped}/{concurrency} connections survived"
    else:
        handle.advance(RunState.DONE)

    latency = LatencyRecorder.merged(r for w in workers for r in w.recorders.values())
    summary = latency.summary()
    op_latency: dict[str, LatencySummary] = {}
    for kind in (CommandKind.GET, CommandKind.SET):
        op_latency[kind.value] = LatencyRecorder.merged(
            w.recorders[kind] for w in workers
        ).summary()

    ops_total = sum(w.ops_measured for w in workers)
    errors_total = sum(w.errors_measured for w in workers)
    if failure is None and ops_total == 0:
        failure = "no operation completed inside the measurement window"
    if failure is None and errors_total > MAX_ERROR_RATE * ops_total:
        failure = f"error rate {errors_total / ops_total:.2%} exceeds {MAX_ERROR_RATE:.0%}"

    get_misses = sum(w.get_misses for w in workers)
    if get_misses:
        logger.warning(f"{get_misses} GET misses on a preloaded key space; eviction suspected")

    elapsed = spec.measured_seconds
    result = RunResult(
        system=system,
        workload=spec.name,
        set_ratio=spec.set_ratio,
        concurrency=concurrency,
        repetition=repetition,
        started_at=handle.started_at,
        ops_total=ops_total,
        errors_total=errors_total,
        elapsed_measured=elapsed,
        throughput=ops_total / elapsed,
        p50_us=summary.p50_us,
        p99_us=summary.p99_us,
        p999_us=summary.p999_us,
        mean_us=summary.mean_us,
        max_us=summary.max_us,
        op_counts={
            k.value: sum(w.op_counts[k] for w in workers)
            for k in (CommandKind.GET, CommandKind.SET)
        },
        op_latency=op_latency,
        get_misses=get_misses,
        warmup_ops=sum(w.warmup_ops for w in workers),
        ramp=_sum_ramp(workers),
        commands_sent=sum(c.stats.commands_sent for c in conns),
        replies_received=sum(c.stats.replies_received for c in conns),
        error_replies=sum(c.stats.errors for c in conns),
        in_flight_at_abort=sum(c.stats.in_flight_at_abort for c in conns),
        dropped_connections=dropped,
        latency_overflow=latency.overflow,
        resource_series=series,
        cpu_mean_cores=cpu_mean_cores(series),
        mem_mean_bytes=mean_used_memory(series),
        seed_record=SeedRecord(
            base_seed=spec.base_seed,
            run_seed=run_seed,
            value_seed=value_seed,
            worker_seeds=[s for i in range(len(workers)) for s in worker_seeds(run_seed, i)],
        ),
        failed=failure is not None,
        failure_reason=failure,
    )
    if failure:
        logger.warning(f"run concurrency={concurrency} rep={repetition} failed: {failure}")
    logger.info(
        f"run done system={system} concurrency={concurrency} rep={repetition} "
        f"ops={ops_total} throughput={result.throughput:.1f} p99={result.p99_us}us"
    )
    return result


def failed_result(
    spec: WorkloadSpec,
    concurrency: int,
    repetition: int,
    system: str,
    run_seed: int,
    reason: str,
) -> RunResult:
    """Placeholder record for a run that could not start."""
    return RunResult(
        system=system,
        workload=spec.name,
        set_ratio=spec.set_ratio,
        concurrency=concurrency,
        repetition=repetition,
        started_at=datetime.now(timezone.utc).isoformat(),
        elapsed_measured=spec.measured_seconds,
        seed_record=SeedRecord(
            base_seed=spec.base_seed,
            run_seed=run_seed,
            value_seed=derive_seed(run_seed, 0, VALUE_STREAM),
        ),
        failed=True,
        failure_reason=reason,
    )


def run_seed_for(spec: WorkloadSpec, concurrency: int, repetition: int) -> int:
    return derive_seed(spec.base_seed, concurrency, repetition)


def sweep(
    endpoint: Endpoint,
    spec: WorkloadSpec,
    repetitions: int = DEFAULT_REPETITIONS,
    system: str = "unknown",
    schema: Optional[InfoSchema] = None,
    resource_interval: float = 5.0,
    skip: Optional[Callable[[int, int], bool]] = None,
    on_result: Optional[Callable[[RunResult], None]] = None,
    max_runs: Optional[int] = None,
) -> list[RunResult]:
    """Every (concurrency, repetition) cell in order, with a cool-down between runs.

    ``skip`` lets callers pass over cells that are already persisted and
    ``max_runs`` stops the sweep early; ``on_result`` sees each result first.
    """
    if repetitions < 1:
        raise InvalidParameterError("repetitions must be >= 1")
    results: list[RunResult] = []
    for concurrency in spec.concurrency_levels:
        for repetition in range(1, repetitions + 1):
            if skip and skip(concurrency, repetition):
                continue
            if max_runs is not None and len(results) >= max_runs:
                logger.info(f"sweep stopped after {len(results)} runs")
                return results
            if results and spec.cooldown:
                time.sleep(spec.cooldown)
            seed = run_seed_for(spec, concurrency, repetition)
            try:
                result = run(
                    endpoint,
                    spec,
                    concurrency,
                    system=system,
                    repetition=repetition,
                    run_seed=seed,
                    schema=schema,
                    resource_interval=resource_interval,
                )
            except KvbenchError as e:
                logger.error(f"run concurrency={concurrency} rep={repetition} failed: {e}")
                result = failed_result(spec, concurrency, repetition, system, seed, str(e))
            if on_result:
                on_result(result)
            results.append(result)
    return results
