import json
import logging
import os
import threading

import pytest

from kvbench.exceptions import OutputLockedError
from kvbench.recorder import (
    LOCK_FILENAME,
    RESULTS_SUFFIX,
    OutputLock,
    ResultStore,
    get_output_dir,
    write_comparisons,
)
from kvbench.stats import welch_test
from kvbench.structs import LatencySummary, ResourceSample, SampleSet, SeedRecord


@pytest.mark.unit
class TestResultStoreInitialization:
    def test_store_creation(self, output_dir):
        store = ResultStore("redis", "A")

        assert store.output_dir == output_dir
        assert store.filename == output_dir / f"redis.A{RESULTS_SUFFIX}"
        assert os.path.isdir(output_dir)

    def test_default_output_dir(self, monkeypatch):
        monkeypatch.delenv("KVBENCH_OUTPUT", raising=False)
        assert get_output_dir() == "results"

    def test_explicit_dir_wins(self, output_dir, tmp_path):
        store = ResultStore("valkey", "B", tmp_path / "elsewhere")
        assert store.filename.parent == tmp_path / "elsewhere"


@pytest.mark.unit
class TestResultStoreFileOperations:
    def test_round_trip_is_field_exact(self, output_dir, make_result):
        result = make_result(
            p50_us=101.5,
            op_counts={"GET": 5000, "SET": 5000},
            op_latency={"GET": LatencySummary(count=5000, p50_us=90.0, p99_us=800.0)},
            ramp=[10, 20, 30],
            resource_series=[ResourceSample(timestamp=0.0, cpu_seconds_total=1.25)],
            seed_record=SeedRecord(base_seed=2**64 - 1, run_seed=3, value_seed=4),
        )
        store = ResultStore("redis", "A")
        store.record(result)

        (loaded,) = store.get()
        assert loaded == result
        assert loaded.seed_record.base_seed == 2**64 - 1

    def test_records_in_file_order(self, output_dir, make_result):
        store = ResultStore("redis", "A")
        for repetition in (1, 2, 3):
            store.record(make_result(repetition=repetition))

        assert [r.repetition for r in store.get()] == [1, 2, 3]

    def test_get_empty(self, output_dir):
        assert ResultStore("redis", "A").get() == []

    def test_torn_last_line_is_skipped(self, output_dir, make_result, caplog):
        store = ResultStore("redis", "A")
        store.record(make_result(repetition=1))
        with open(store.filename, "a") as f:
            f.write('{"schema_version": 1, "system": "red')

        with caplog.at_level(logging.WARNING):
            results = store.get()

        assert [r.repetition for r in results] == [1]
        assert "truncated last line" in caplog.text

    def test_unknown_schema_version_is_skipped(self, output_dir, make_result, caplog):
        store = ResultStore("redis", "A")
        raw = json.loads(make_result().model_dump_json())
        raw["schema_version"] = 999
        with open(store.filename, "w") as f:
            f.write(json.dumps(raw) + "\n")

        with caplog.at_level(logging.WARNING):
            assert store.get() == []
        assert "not supported" in caplog.text

    def test_latest_wins_per_cell(self, output_dir, make_result):
        store = ResultStore("redis", "A")
        store.record(make_result(throughput=100.0, repetition=1))
        store.record(make_result(throughput=200.0, repetition=1))
        store.record(make_result(throughput=300.0, repetition=2))

        assert [(r.repetition, r.throughput) for r in store.latest()] == [
            (1, 200.0),
            (2, 300.0),
        ]

    def test_failed_cells_are_not_complete(self, output_dir, make_result):
        store = ResultStore("redis", "A")
        store.record(make_result(concurrency=50, repetition=1))
        store.record(make_result(concurrency=50, repetition=2, failed=True))
        store.record(make_result(concurrency=100, repetition=1, failed=True))
        store.record(make_result(concurrency=100, repetition=1))

        assert store.completed_cells() == {(50, 1), (100, 1)}

    def test_concurrent_recording(self, output_dir, make_result):
        store = ResultStore("redis", "A")
        errors = []

        def record(repetition):
            try:
                store.record(make_result(repetition=repetition))
            except Exception as e:
                errors.append(e)

        threads = [threading.Thread(target=record, args=(i,)) for i in range(1, 6)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        assert errors == []
        assert sorted(r.repetition for r in store.get()) == [1, 2, 3, 4, 5]


@pytest.mark.unit
class TestResultStoreClassMethods:
    def test_list_files(self, output_dir):
        output_dir.mkdir(parents=True)
        for name in ["redis.A.results.jsonl", "garnet.B.results.jsonl", "notes.txt"]:
            (output_dir / name).write_text("")

        assert ResultStore.list_files() == ["garnet.B.results.jsonl", "redis.A.results.jsonl"]

    def test_list_missing_dir(self, tmp_path):
        assert ResultStore.list_files(tmp_path / "nothing") == []

    @pytest.mark.parametrize(
        "filename,expected",
        [
            ("redis.A.results.jsonl", ("redis", "A")),
            ("redis.7.2.B.results.jsonl", ("redis.7.2", "B")),
            ("garnet.smoke", ("garnet", "smoke")),
        ],
    )
    def test_parse_filename(self, filename, expected):
        assert ResultStore.parse_filename(filename) == expected

    def test_load_all(self, output_dir, make_result):
        ResultStore("redis", "A").record(make_result(system="redis"))
        ResultStore("garnet", "A").record(make_result(system="garnet"))
        ResultStore("garnet", "B").record(make_result(system="garnet", workload="B"))

        assert len(ResultStore.load_all()) == 3
        assert sorted(r.system for r in ResultStore.load_all(workload="A")) == [
            "garnet",
            "redis",
        ]


@pytest.mark.unit
class TestComparisons:
    def test_write_comparisons(self, tmp_path):
        report = welch_test(
            SampleSet(label="garnet", values=[1.0, 2.0, 3.0]),
            SampleSet(label="redis", values=[2.0, 3.0, 4.0]),
        )
        path = write_comparisons(tmp_path, "A", "p99", [report, report])

        assert path.name == "comparisons.A.p99.jsonl"
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["label_a"] == "garnet"


@pytest.mark.unit
class TestOutputLock:
    def test_exclusive(self, tmp_path):
        with OutputLock(tmp_path) as lock:
            assert (tmp_path / LOCK_FILENAME).read_text().strip() == str(os.getpid())
            assert lock.held
            with pytest.raises(OutputLockedError):
                OutputLock(tmp_path).acquire()
        assert not (tmp_path / LOCK_FILENAME).exists()

    def test_reacquire_after_release(self, tmp_path):
        lock = OutputLock(tmp_path / "new")
        lock.acquire()
        lock.release()
        lock.acquire()
        assert lock.held
        lock.release()

    def test_release_on_error(self, tmp_path):
        with pytest.raises(RuntimeError):
            with OutputLock(tmp_path):
                raise RuntimeError("boom")
        assert not (tmp_path / LOCK_FILENAME).exists()
