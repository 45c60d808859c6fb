import pytest

from kvbench.exceptions import NoDataError
from kvbench.report import (
    PLOT_PANELS,
    build_summary,
    format_comparisons,
    hot_key_note,
    plot_series,
    report_notes,
    summary_csv,
    summary_text,
    to_csv,
    write_report,
)
from kvbench.stats import compare_cells
from kvbench.structs import EfficiencyWeights
from kvbench.zipf import ZipfianParams, build_table


def grid(make_result, system, throughputs, levels=(50, 100), **overrides):
    return [
        make_result(
            system=system,
            throughput=tp,
            concurrency=level,
            repetition=repetition,
            **overrides,
        )
        for level in levels
        for repetition, tp in enumerate(throughputs, start=1)
    ]


@pytest.fixture
def two_systems(make_result):
    return grid(make_result, "redis", [100_000, 100_100, 99_900]) + grid(
        make_result, "garnet", [208_000, 208_100, 207_900]
    )


def row(table, system, metric):
    return next(r for r in table.rows if r.system == system and r.metric == metric)


@pytest.mark.unit
class TestBuildSummary:
    def test_write_throughput_delta(self, two_systems):
        table = build_summary(two_systems, "redis")
        write = row(table, "garnet", "throughput-write")
        assert write.delta_text == "+108.0%"
        assert (write.n_system, write.n_baseline) == (6, 6)
        assert write.significant

    def test_delta_matches_means(self, two_systems):
        for r in build_summary(two_systems, "redis").rows:
            expected = (r.mean_system / r.mean_baseline - 1.0) * 100.0
            assert abs(r.delta_pct - expected) <= 1e-9

    def test_read_rows_need_read_heavy_runs(self, two_systems):
        metrics = {r.metric for r in build_summary(two_systems, "redis").rows}
        assert "throughput-read" not in metrics
        assert {"throughput-write", "p99", "p999", "cpu-efficiency"} <= metrics

    @pytest.mark.parametrize("set_ratio,expected", [(1.0, True), (0.5, True), (0.05, False)])
    def test_write_heavy_runs(self, make_result, set_ratio, expected):
        assert make_result(set_ratio=set_ratio).write_heavy is expected

    def test_read_heavy_workload(self, make_result):
        results = grid(make_result, "redis", [100, 102], workload="B", set_ratio=0.05)
        results += grid(make_result, "valkey", [150, 153], workload="B", set_ratio=0.05)
        read = row(build_summary(results, "redis"), "valkey", "throughput-read")
        assert read.delta_text == "+50.0%"

    def test_identical_systems(self, make_result):
        results = grid(make_result, "redis", [1000, 1010, 990]) + grid(
            make_result, "valkey", [1000, 1010, 990]
        )
        table = build_summary(results, "redis")
        assert table.rows
        assert all(r.delta_text == "+0.0%" for r in table.rows)
        assert not any(r.significant for r in table.rows)

    def test_baseline_only(self, make_result):
        assert build_summary(grid(make_result, "redis", [1, 2]), "redis").rows == []

    def test_failed_runs_are_ignored(self, make_result, two_systems):
        failed = make_result(system="garnet", throughput=1.0, repetition=4, failed=True)
        table = build_summary(two_systems + [failed], "redis")
        assert row(table, "garnet", "throughput-write").delta_text == "+108.0%"

    def test_single_repetition_has_no_p_value(self, make_result):
        results = [make_result(system="redis"), make_result(system="garnet", throughput=2000)]
        write = row(build_summary(results, "redis"), "garnet", "throughput-write")
        assert write.p_value is None
        assert not write.significant


@pytest.mark.unit
class TestSummaryFormats:
    def test_csv_line_endings_and_header(self, two_systems):
        text = summary_csv(build_summary(two_systems, "redis"))
        lines = text.split("\r\n")
        assert lines[0] == (
            "system,metric,mean_system,mean_baseline,delta,p_value,significant,"
            "n_system,n_baseline"
        )
        assert text.endswith("\r\n")
        assert "garnet,throughput-write,208000.0,100000.0,+108.0%," in text

    def test_latency_is_integer_microseconds(self, make_result):
        results = grid(make_result, "redis", [1, 2], p99_us=900.4) + grid(
            make_result, "garnet", [1, 2], p99_us=1200.6
        )
        text = summary_csv(build_summary(results, "redis"))
        assert "garnet,p99,1201,900,+33.3%" in text

    def test_rfc4180_quoting(self):
        assert to_csv(["name"], [['a,"b"']]) == 'name\r\n"a,""b"""\r\n'

    def test_text_title(self, two_systems):
        text = summary_text(build_summary(two_systems, "redis"))
        assert text.startswith("Performance summary normalized to redis\n")
        assert "+108.0%" in text

    def test_empty_text(self, make_result):
        text = summary_text(build_summary(grid(make_result, "redis", [1, 2]), "redis"))
        assert "no system to compare" in text


@pytest.mark.unit
class TestPlotSeries:
    def test_baseline_column_first(self, two_systems):
        series = plot_series(two_systems, "redis")
        assert set(series) == {("A", panel) for panel in PLOT_PANELS}
        assert series[("A", "throughput")].split("\r\n")[:3] == [
            "concurrency,redis,garnet",
            "50,100000.0,208000.0",
            "100,100000.0,208000.0",
        ]

    def test_baseline_only_keeps_baseline_column(self, make_result):
        series = plot_series(grid(make_result, "redis", [1, 2]), "redis")
        assert series[("A", "p99")].startswith("concurrency,redis\r\n")

    def test_missing_cell_is_empty(self, make_result):
        results = grid(make_result, "redis", [1000, 1000], levels=(50, 100))
        results += grid(make_result, "garnet", [2000, 2000], levels=(50,))
        lines = plot_series(results, "redis")[("A", "throughput")].split("\r\n")
        assert lines[2] == "100,1000.0,"

    def test_missing_resource_is_empty(self, make_result):
        results = grid(make_result, "redis", [1, 2], cpu_mean_cores=None)
        lines = plot_series(results, "redis")[("A", "cpu")].split("\r\n")
        assert lines[1] == "50,"


@pytest.mark.unit
class TestWriteReport:
    def test_files(self, tmp_path, two_systems):
        written = write_report(two_systems, "redis", tmp_path)
        names = {p.name for p in written}
        assert {"summary.csv", "summary.txt", "plot.A.throughput.csv", "plot.A.p999.csv"} <= names

    def test_byte_identical_regeneration(self, tmp_path, two_systems):
        first = write_report(two_systems, "redis", tmp_path / "one", key_count=4_865_899)
        second = write_report(
            list(reversed(two_systems)), "redis", tmp_path / "two", key_count=4_865_899
        )
        for a, b in zip(first, second):
            assert a.name == b.name
            assert a.read_bytes() == b.read_bytes()

    def test_no_results(self, tmp_path):
        with pytest.raises(NoDataError):
            write_report([], "redis", tmp_path)

    def test_notes(self, make_result, two_systems, tiny_spec):
        failed = make_result(system="garnet", repetition=9, failed=True)
        notes = report_notes(
            two_systems + [failed],
            "redis",
            key_count=4_865_899,
            repetitions=5,
            weights=EfficiencyWeights(),
            workload=tiny_spec(),
        )
        assert "4,865,899 exact" in notes
        assert "~4,800,000" in notes
        assert "toolkit default" in notes
        assert "failed runs excluded: 1" in notes
        assert "efficiency index garnet" in notes
        assert "pooled over every concurrency level" in notes
        assert "workload tiny: the hottest 2 of 200 keys" in notes

    def test_hot_key_note(self, tiny_spec):
        spec = tiny_spec(key_count=1000, skew=0.9)
        share = build_table(ZipfianParams(1000, 0.9)).top_share(10)
        assert share > 0.1
        assert hot_key_note(spec) == (
            f"workload tiny: the hottest 10 of 1,000 keys draw {share * 100:.1f}% "
            "of requests (skew 0.9)"
        )

    def test_hot_key_note_small_key_space(self, tiny_spec):
        assert "the hottest 1 of 50 keys" in hot_key_note(tiny_spec(key_count=50))


@pytest.mark.unit
class TestFormatComparisons:
    def test_table(self, two_systems):
        text = format_comparisons(compare_cells(two_systems, "throughput", "redis"))
        lines = text.splitlines()
        assert lines[0].split() == [
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
        assert len(lines) == 4
        assert "+108.0%" in lines[2]
