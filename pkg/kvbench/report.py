"""
Normalized summary table and plot-ready series from persisted run results.

Everything here is a pure function of the result records, so regenerating a
report from the same files yields byte-identical output.
"""

import csv
import io
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .exceptions import KvbenchError, NoDataError
from .metrics import efficiency_index, normalized_throughput
from .stats import welch_test
from .structs import (
    EfficiencyWeights,
    RunResult,
    SampleSet,
    SummaryRow,
    SummaryTable,
    TTestReport,
    WorkloadSpec,
)
from .workload import (
    DEFAULT_MEMORY_BUDGET,
    DEFAULT_REPETITIONS,
    ROUNDED_KEY_COUNT,
    zipfian_table,
)

logger = logging.getLogger()

SUMMARY_METRICS = [
    "throughput-write",
    "throughput-read",
    "p99",
    "p999",
    "cpu-efficiency",
    "memory-efficiency",
]
LATENCY_METRICS = {"p99", "p999"}
PLOT_PANELS = ["throughput", "p99", "p999", "cpu", "memory"]

CPU_ONLY = EfficiencyWeights(cpu_weight=1.0, mem_weight=0.0)
MEMORY_ONLY = EfficiencyWeights(cpu_weight=0.0, mem_weight=1.0)

Extractor = Callable[[RunResult], Optional[float]]


def _efficiency(weights: EfficiencyWeights, memory_budget: int) -> Extractor:
    def extract(r: RunResult) -> Optional[float]:
        # a zero weight makes the matching resource irrelevant
        cpu = r.cpu_mean_cores if weights.cpu_weight else 0.0
        mem: Optional[float] = 0.0
        if weights.mem_weight:
            mem = r.mem_mean_bytes / memory_budget if r.mem_mean_bytes is not None else None
        if cpu is None or mem is None:
            return None
        try:
            return efficiency_index(r.throughput, cpu, mem, weights)
        except KvbenchError:
            return None

    return extract


def _extractors(memory_budget: int) -> dict[str, tuple[Extractor, Optional[bool]]]:
    """metric -> (value of one run, write-heavy filter or None for all)"""
    return {
        "throughput-write": (lambda r: r.throughput, True),
        "throughput-read": (lambda r: r.throughput, False),
        "p99": (lambda r: r.p99_us, None),
        "p999": (lambda r: r.p999_us, None),
        "cpu-efficiency": (_efficiency(CPU_ONLY, memory_budget), None),
        "memory-efficiency": (_efficiency(MEMORY_ONLY, memory_budget), None),
    }


def _cells(results: Iterable[RunResult]) -> dict[str, dict[tuple[str, int], list[RunResult]]]:
    by_system: dict[str, dict[tuple[str, int], list[RunResult]]] = defaultdict(
        lambda: defaultdict(list)
    )
    for r in results:
        if not r.failed:
            by_system[r.system][(r.workload, r.concurrency)].append(r)
    return by_system


def build_summary(
    results: Sequence[RunResult],
    baseline_system: str,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> SummaryTable:
    """One row per non-baseline system and metric, pooled over shared cells."""
    by_system = _cells(results)
    baseline = by_system.get(baseline_system, {})
    table = SummaryTable(baseline_system=baseline_system)
    extractors = _extractors(memory_budget)

    for system in sorted(set(by_system) - {baseline_system}):
        common = sorted(set(by_system[system]) & set(baseline))
        if not common:
            logger.warning(f"{system} shares no cell with baseline {baseline_system}")
            continue
        for metric in SUMMARY_METRICS:
            extract, write_heavy = extractors[metric]
            values: dict[str, list[float]] = {system: [], baseline_system: []}
            for cell in common:
                for name, cells in ((system, by_system[system]), (baseline_system, baseline)):
                    for r in cells[cell]:
                        if write_heavy is not None and r.write_heavy != write_heavy:
                            continue
                        v = extract(r)
                        if v is not None and math.isfinite(v):
                            values[name].append(v)
            ours, theirs = values[system], values[baseline_system]
            if not ours or not theirs:
                continue
            mean_system = float(np.mean(ours))
            mean_baseline = float(np.mean(theirs))
            if mean_baseline <= 0:
                continue
            p_value: Optional[float] = None
            significant = False
            if len(ours) >= 2 and len(theirs) >= 2:
                test = welch_test(
                    SampleSet(label=system, values=ours),
                    SampleSet(label=baseline_system, values=theirs),
                )
                p_value, significant = test.p_value, test.significant
            table.rows.append(
                SummaryRow(
                    system=system,
                    metric=metric,
                    mean_system=mean_system,
                    mean_baseline=mean_baseline,
                    delta_pct=(normalized_throughput(mean_system, mean_baseline) - 1.0) * 100.0,
                    p_value=p_value,
                    significant=significant,
                    n_system=len(ours),
                    n_baseline=len(theirs),
                )
            )
    return table


def _format_mean(metric: str, value: float) -> str:
    if metric in LATENCY_METRICS:
        return str(int(round(value)))
    return f"{value:.1f}"


def _format_p(p: Optional[float]) -> str:
    return "" if p is None else f"{p:.4f}"


SUMMARY_HEADER = [
    "system",
    "metric",
    "mean_system",
    "mean_baseline",
    "delta",
    "p_value",
    "significant",
    "n_system",
    "n_baseline",
]


def _summary_rows(table: SummaryTable) -> list[list[str]]:
    return [
        [
            row.system,
            row.metric,
            _format_mean(row.metric, row.mean_system),
            _format_mean(row.metric, row.mean_baseline),
            row.delta_text,
            _format_p(row.p_value),
            "yes" if row.significant else "no",
            str(row.n_system),
            str(row.n_baseline),
        ]
        for row in table.rows
    ]


def to_csv(header: list[str], rows: list[list[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def align(header: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    lines = [
        "  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
        for line in [header, ["-" * w for w in widths], *rows]
    ]
    return "\n".join(lines) + "\n"


def summary_csv(table: SummaryTable) -> str:
    return to_csv(SUMMARY_HEADER, _summary_rows(table))


def summary_text(table: SummaryTable) -> str:
    title = f"Performance summary normalized to {table.baseline_system}\n\n"
    if not table.rows:
        return title + "(no system to compare against the baseline)\n"
    return title + align(SUMMARY_HEADER, _summary_rows(table))


def _panel_value(panel: str, runs: list[RunResult]) -> Optional[str]:
    if panel == "throughput":
        return f"{np.mean([r.throughput for r in runs]):.1f}"
    if panel in LATENCY_METRICS:
        values = [v for r in runs if (v := r.metric(panel)) is not None]
        return str(int(round(float(np.mean(values))))) if values else None
    if panel == "cpu":
        cores = [r.cpu_mean_cores for r in runs if r.cpu_mean_cores is not None]
        return f"{np.mean(cores):.3f}" if cores else None
    memory = [r.mem_mean_bytes for r in runs if r.mem_mean_bytes is not None]
    return str(int(round(float(np.mean(memory))))) if memory else None


def plot_series(results: Sequence[RunResult], baseline_system: str) -> dict[tuple[str, str], str]:
    """(workload, panel) -> CSV with a concurrency column and one column per system.

    Missing cells stay empty; nothing is interpolated.
    """
    by_system = _cells(results)
    systems = sorted(by_system, key=lambda s: (s != baseline_system, s))
    workloads = sorted({w for cells in by_system.values() for w, _ in cells})
    series = {}
    for workload in workloads:
        levels = sorted(
            {c for cells in by_system.values() for w, c in cells if w == workload}
        )
        for panel in PLOT_PANELS:
            rows = []
            for level in levels:
                row = [str(level)]
                for system in systems:
                    runs = by_system[system].get((workload, level), [])
                    value = _panel_value(panel, runs) if runs else None
                    row.append(value or "")
                rows.append(row)
            series[(workload, panel)] = to_csv(["concurrency", *systems], rows)
    return series


def hot_key_note(workload: WorkloadSpec, percent: int = 1) -> str:
    hot = max(1, workload.key_count * percent // 100)
    share = zipfian_table(workload.key_count, workload.skew).top_share(hot)
    return (
        f"workload {workload.name}: the hottest {hot:,} of {workload.key_count:,} keys "
        f"draw {share * 100:.1f}% of requests (skew {workload.skew:g})"
    )


def report_notes(
    results: Sequence[RunResult],
    baseline_system: str,
    key_count: Optional[int],
    repetitions: int,
    weights: EfficiencyWeights,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    workload: Optional[WorkloadSpec] = None,
) -> str:
    lines = [f"baseline system: {baseline_system}"]
    lines.append(
        "deltas compare means pooled over every concurrency level both systems ran; "
        "per-level ratios are in the plot series and in compare output"
    )
    if key_count is not None:
        lines.append(
            f"preload key count: {key_count:,} exact "
            f"(the published setup rounds this to ~{ROUNDED_KEY_COUNT:,})"
        )
    if workload is not None:
        lines.append(hot_key_note(workload))
    lines.append("cpu is measured server-side from INFO (used_cpu_sys + used_cpu_user)")
    repetition_note = f"repetitions per cell: {repetitions}"
    if repetitions == DEFAULT_REPETITIONS:
        repetition_note += " (toolkit default, not taken from a published setup)"
    lines.append(repetition_note)
    lines.append(
        f"memory is reported as a fraction of a {memory_budget:,} byte budget"
    )

    failed = sum(1 for r in results if r.failed)
    if failed:
        lines.append(f"failed runs excluded: {failed}")

    weighted = _efficiency(weights, memory_budget)
    by_system = _cells(results)
    for system in sorted(by_system):
        values = [
            v
            for runs in by_system[system].values()
            for r in runs
            if (v := weighted(r)) is not None
        ]
        if values:
            lines.append(
                f"efficiency index {system} (cpu {weights.cpu_weight:g}, "
                f"memory {weights.mem_weight:g}): {np.mean(values):.1f}"
            )
    return "\n".join(lines) + "\n"


def write_report(
    results: Sequence[RunResult],
    baseline_system: str,
    output_dir: Union[str, Path],
    weights: Optional[EfficiencyWeights] = None,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    key_count: Optional[int] = None,
    repetitions: int = DEFAULT_REPETITIONS,
    workload: Optional[WorkloadSpec] = None,
) -> list[Path]:
    """Write summary.csv, summary.txt and plot.<workload>.<panel>.csv files."""
    if not results:
        raise NoDataError("no results to report")
    weights = weights or EfficiencyWeights()
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)

    table = build_summary(results, baseline_system, memory_budget)
    notes = report_notes(
        results, baseline_system, key_count, repetitions, weights, memory_budget, workload
    )
    files = {
        "summary.csv": summary_csv(table),
        "summary.txt": summary_text(table) + "\n" + notes,
    }
    for (name, panel), content in plot_series(results, baseline_system).items():
        files[f"plot.{name}.{panel}.csv"] = content

    written = []
    for name, content in files.items():
        path = output / name
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(content)
        written.append(path)
    logger.info(f"report written to {output} ({len(written)} files)")
    return written


COMPARISON_HEADER = [
    "workload",
    "concurrency",
    "system",
    "baseline",
    "mean_system",
    "mean_baseline",
    "delta",
    "t",
    "df",
    "p_value",
    "significant",
]


def format_comparisons(reports: Sequence[TTestReport]) -> str:
    rows = []
    for r in reports:
        delta = (r.mean_a / r.mean_b - 1.0) * 100.0 if r.mean_b else math.nan
        rows.append(
            [
                r.workload or "",
                str(r.concurrency or ""),
                r.label_a,
                r.label_b,
                f"{r.mean_a:.1f}",
                f"{r.mean_b:.1f}",
                f"{delta:+.1f}%",
                f"{r.t_statistic:.3f}",
                f"{r.degrees_of_freedom:.2f}",
                _format_p(r.p_value),
                "yes" if r.significant else "no",
            ]
        )
    return align(COMPARISON_HEADER, rows)
