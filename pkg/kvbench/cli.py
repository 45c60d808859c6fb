import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import (
    env_flag,
    load_config,
    parse_seed,
    resolve_schema,
    resolve_workload,
)
from .exceptions import (
    ConfigError,
    ConnectFailedError,
    InvalidParameterError,
    KvbenchError,
    OutputLockedError,
    PreloadError,
)
from .recorder import OutputLock, ResultStore, write_comparisons
from .report import build_summary, format_comparisons, summary_text, write_report
from .stats import compare_cells
from .structs import BenchmarkConfig, Metric, Target
from .workload import compute_preload_keycount, plan_preload, preload, sweep

logger = logging.getLogger()

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"
LOG_FILENAME = "kvbench.log"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def setup_logging(debug: bool = False) -> None:
    log_level = logging.DEBUG if debug else logging.INFO
    logger.setLevel(log_level)
    for handler in [h for h in logger.handlers if getattr(h, "kvbench", False)]:
        logger.removeHandler(handler)
        handler.close()

    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setLevel(log_level)
    stderr_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    setattr(stderr_handler, "kvbench", True)
    logger.addHandler(stderr_handler)


def add_file_logging(output_dir: Path) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(output_dir / LOG_FILENAME, mode="a")
    file_handler.setLevel(logger.level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    setattr(file_handler, "kvbench", True)
    logger.addHandler(file_handler)


def _target(config: BenchmarkConfig, name: str) -> Optional[Target]:
    target = config.target(name)
    if target is None:
        known = ", ".join(t.system for t in config.targets)
        logger.error(f"unknown target '{name}' (configured: {known})")
    return target


def sweep_cells(levels: Sequence[int], repetitions: int) -> set[tuple[int, int]]:
    return {(c, r) for c in levels for r in range(1, repetitions + 1)}


def cmd_preload(
    config: BenchmarkConfig,
    target: str,
    workload: Optional[str] = None,
    seed: Optional[int] = None,
) -> int:
    t = _target(config, target)
    if t is None:
        return EXIT_USAGE
    spec = resolve_workload(config, workload, seed)
    plan = plan_preload(
        config.memory_budget, config.target_fill, spec.value_size, config.overhead_per_key
    )
    if plan.key_count != spec.key_count:
        raise ConfigError(
            f"workload {spec.name} has key_count {spec.key_count} but the memory "
            f"budget sizes the preload at {plan.key_count} keys"
        )
    try:
        report = preload(
            t.endpoint,
            plan,
            spec.key_mapping,
            parallelism=config.preload_parallelism,
            value_seed=spec.base_seed,
            label=t.system,
        )
    except ConnectFailedError as e:
        logger.error(f"cannot reach {t.system} at {t.endpoint}: {e}")
        return EXIT_FAILURE
    except PreloadError as e:
        logger.error(f"{e}; resume ranges: {e.remaining}")
        return EXIT_FAILURE

    print(f"key count: {report.key_count}")
    print(f"elapsed: {report.elapsed:.1f}s")
    print(f"used memory: {report.used_memory if report.used_memory is not None else 'unknown'}")
    if report.failed:
        logger.error(
            f"preload of {t.system} failed: {report.errors} errors, "
            f"{report.issued}/{report.key_count} issued"
        )
        return EXIT_FAILURE
    return EXIT_OK


def cmd_sweep(
    config: BenchmarkConfig,
    target: str,
    workload: Optional[str] = None,
    seed: Optional[int] = None,
    max_runs: Optional[int] = None,
) -> int:
    t = _target(config, target)
    if t is None:
        return EXIT_USAGE
    spec = resolve_workload(config, workload, seed)
    schema = resolve_schema(t)

    with OutputLock(config.output_dir):
        store = ResultStore(t.system, spec.name, config.output_dir)
        cells = sweep_cells(spec.concurrency_levels, config.repetitions)
        # cells left over from a sweep with other levels or repetitions do not count
        done = store.completed_cells() & cells
        if done == cells:
            print(f"all cells present for {t.system} workload {spec.name} ({len(cells)} runs)")
            return EXIT_OK
        logger.info(
            f"sweep target={t.system} workload={spec.name} "
            f"cells={len(cells)} present={len(done)}"
        )
        results = sweep(
            t.endpoint,
            spec,
            config.repetitions,
            system=t.system,
            schema=schema,
            resource_interval=config.resource_interval,
            skip=lambda c, r: (c, r) in done,
            on_result=store.record,
            max_runs=max_runs,
        )

    succeeded = sum(1 for r in results if not r.failed)
    print(f"runs: {len(results)} new, {succeeded} succeeded, {len(results) - succeeded} failed")
    if results and not succeeded:
        return EXIT_FAILURE
    return EXIT_OK


def cmd_compare(
    config: BenchmarkConfig,
    metric: str,
    workload: Optional[str] = None,
) -> int:
    try:
        chosen = Metric(metric)
    except ValueError:
        valid = ", ".join(m.value for m in Metric)
        logger.error(f"unknown metric '{metric}' (valid: {valid})")
        return EXIT_USAGE

    results = ResultStore.load_all(config.output_dir, workload)
    systems = {r.system for r in results}
    if config.baseline_system not in systems or not systems - {config.baseline_system}:
        logger.error(
            f"nothing to compare: need results for baseline {config.baseline_system} "
            f"and at least one other system in {config.output_dir}"
        )
        return EXIT_FAILURE

    reports = compare_cells(results, chosen, config.baseline_system)
    for name in sorted({r.workload for r in reports if r.workload}):
        write_comparisons(
            config.output_dir, name, chosen.value, [r for r in reports if r.workload == name]
        )
    print(format_comparisons(reports), end="")
    if not reports:
        logger.error("no cell had enough repetitions to compare")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_report(config: BenchmarkConfig) -> int:
    results = ResultStore.load_all(config.output_dir)
    if not results:
        logger.error(f"no results in {config.output_dir}")
        return EXIT_FAILURE
    spec = resolve_workload(config)
    key_count = compute_preload_keycount(
        config.memory_budget, config.target_fill, spec.value_size, config.overhead_per_key
    )
    with OutputLock(config.output_dir):
        write_report(
            results,
            config.baseline_system,
            config.output_dir,
            weights=config.weights,
            memory_budget=config.memory_budget,
            key_count=key_count,
            repetitions=config.repetitions,
            workload=spec,
        )
    print(summary_text(build_summary(results, config.baseline_system, config.memory_budget)), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvbench", description="Benchmark Redis-protocol key-value stores."
    )
    parser.add_argument("--config", help="JSON config file (or KVBENCH_CONFIG).")
    parser.add_argument("--seed", help="Base seed, unsigned 64-bit (or KVBENCH_SEED).")
    parser.add_argument("--output", help="Output directory (or KVBENCH_OUTPUT).")
    parser.add_argument("--debug", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preload", help="Fill a target to the configured memory pressure.")
    p.add_argument("target", help="System identifier from the config.")
    p.add_argument("-w", "--workload", help="Builtin workload name or JSON file.")

    p = sub.add_parser("sweep", help="Run every concurrency level and repetition.")
    p.add_argument("target", help="System identifier from the config.")
    p.add_argument("-w", "--workload", help="Builtin workload name or JSON file.")
    p.add_argument("--max-runs", type=int, help="Stop after this many new runs.")

    p = sub.add_parser("compare", help="Welch t-test of each system against the baseline.")
    p.add_argument("metric", help=f"One of: {', '.join(m.value for m in Metric)}.")
    p.add_argument("-w", "--workload", help="Only compare this workload.")

    sub.add_parser("report", help="Write the summary table and plot series.")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(args.debug or env_flag("DEBUG"))
    try:
        config = load_config(args.config, args.output)
        seed = parse_seed(args.seed) if args.seed is not None else None
    except (ConfigError, InvalidParameterError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    add_file_logging(config.output_dir)

    try:
        if args.command == "preload":
            return cmd_preload(config, args.target, args.workload, seed)
        if args.command == "sweep":
            return cmd_sweep(config, args.target, args.workload, seed, args.max_runs)
        if args.command == "compare":
            return cmd_compare(config, args.metric, args.workload)
        return cmd_report(config)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except OutputLockedError as e:
        logger.error(str(e))
        return EXIT_FAILURE
    except KvbenchError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
