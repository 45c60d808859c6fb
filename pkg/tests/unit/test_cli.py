import json
import logging
import socket

import pytest

from kvbench.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, LOG_FILENAME, main
from kvbench.recorder import LOCK_FILENAME, ResultStore

KEYS = 100
VALUE_SIZE = 32
OVERHEAD = 300


def write_config(path, targets, output_dir, **overrides):
    config = {
        "targets": targets,
        "workload": {
            "name": "tiny",
            "set_ratio": 0.05,
            "get_ratio": 0.95,
            "skew": 1.4,
            "key_count": KEYS,
            "value_size": VALUE_SIZE,
            "duration": 0.3,
            "warmup": 0.1,
            "concurrency_levels": [1, 2],
            "base_seed": 1,
            "cooldown": 0.0,
        },
        "repetitions": 2,
        "baseline_system": targets[0]["system"],
        "output_dir": str(output_dir),
        "memory_budget": KEYS * (VALUE_SIZE + OVERHEAD),
        "target_fill": 1.0,
        "overhead_per_key": OVERHEAD,
        "preload_parallelism": 2,
        "resource_interval": 0.1,
    }
    config.update(overrides)
    path.write_text(json.dumps(config))
    return str(path)


def url(endpoint):
    return f"redis://{endpoint.host}:{endpoint.port}"


@pytest.fixture
def config_path(tmp_path, mock_server, output_dir):
    targets = [
        {"system": "redis", "endpoint": url(mock_server.endpoint)},
        {"system": "garnet", "endpoint": url(mock_server.endpoint), "info_schema": "redis"},
    ]
    return write_config(tmp_path / "config.json", targets, output_dir)


@pytest.fixture
def stored_results(output_dir, make_result):
    def store(*systems):
        for i, system in enumerate(systems):
            results = ResultStore(system, "A", output_dir)
            for concurrency in (50, 100):
                for repetition, tp in enumerate([1000 + 100 * i, 1010 + 100 * i], start=1):
                    results.record(
                        make_result(
                            system=system,
                            throughput=tp,
                            concurrency=concurrency,
                            repetition=repetition,
                        )
                    )

    return store


@pytest.mark.unit
class TestUsage:
    def test_no_subcommand(self):
        assert main([]) == EXIT_USAGE

    def test_missing_target(self, config_path):
        assert main(["--config", config_path, "sweep"]) == EXIT_USAGE

    def test_missing_config(self):
        assert main(["report"]) == EXIT_USAGE

    def test_invalid_config(self, tmp_path, caplog):
        path = tmp_path / "bad.json"
        path.write_text('{"targets": [], "baseline_system": "redis"}')
        with caplog.at_level(logging.ERROR):
            assert main(["--config", str(path), "report"]) == EXIT_USAGE
        assert "invalid config" in caplog.text

    def test_bad_seed(self, config_path):
        assert main(["--config", config_path, "--seed", "minus-one", "report"]) == EXIT_USAGE

    def test_config_from_environment(self, config_path, monkeypatch, stored_results):
        stored_results("redis")
        monkeypatch.setenv("KVBENCH_CONFIG", config_path)
        assert main(["report"]) == EXIT_OK


@pytest.mark.unit
class TestPreloadCommand:
    def test_preload(self, config_path, mock_server, output_dir, capsys):
        assert main(["--config", config_path, "preload", "redis"]) == EXIT_OK
        out = capsys.readouterr().out
        assert f"key count: {KEYS}" in out
        assert "used memory:" in out
        assert len(mock_server.store) == KEYS
        assert (output_dir / LOG_FILENAME).is_file()

    def test_unknown_target(self, config_path, caplog):
        with caplog.at_level(logging.ERROR):
            assert main(["--config", config_path, "preload", "memcached"]) == EXIT_USAGE
        assert "unknown target" in caplog.text

    def test_unreachable_target(self, tmp_path, output_dir, caplog):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        path = write_config(
            tmp_path / "config.json",
            [{"system": "redis", "endpoint": f"redis://127.0.0.1:{port}"}],
            output_dir,
        )
        with caplog.at_level(logging.ERROR):
            assert main(["--config", path, "preload", "redis"]) == EXIT_FAILURE
        assert "cannot reach redis" in caplog.text

    def test_workload_must_fit_budget(self, tmp_path, mock_server, output_dir, caplog):
        path = write_config(
            tmp_path / "config.json",
            [{"system": "redis", "endpoint": url(mock_server.endpoint)}],
            output_dir,
            memory_budget=10 * KEYS * (VALUE_SIZE + OVERHEAD),
        )
        with caplog.at_level(logging.ERROR):
            assert main(["--config", path, "preload", "redis"]) == EXIT_USAGE
        assert "sizes the preload" in caplog.text


@pytest.mark.unit
class TestSweepCommand:
    def test_sweep_and_resume(self, config_path, output_dir, capsys):
        assert main(["--config", config_path, "preload", "redis"]) == EXIT_OK
        assert main(["--config", config_path, "sweep", "redis"]) == EXIT_OK
        store = ResultStore("redis", "tiny", output_dir)
        assert [r.cell for r in store.get()] == [(1, 1), (1, 2), (2, 1), (2, 2)]
        assert not (output_dir / LOCK_FILENAME).exists()

        capsys.readouterr()
        assert main(["--config", config_path, "sweep", "redis"]) == EXIT_OK
        assert "all cells present" in capsys.readouterr().out
        assert len(store.get()) == 4

    def test_cells_from_other_levels_do_not_count(
        self, config_path, output_dir, make_result, capsys
    ):
        store = ResultStore("redis", "tiny", output_dir)
        for concurrency in (50, 100):
            for repetition in (1, 2):
                store.record(
                    make_result(workload="tiny", concurrency=concurrency, repetition=repetition)
                )
        assert main(["--config", config_path, "preload", "redis"]) == EXIT_OK

        capsys.readouterr()
        assert main(["--config", config_path, "sweep", "redis"]) == EXIT_OK
        assert "all cells present" not in capsys.readouterr().out
        assert store.completed_cells() >= {(1, 1), (1, 2), (2, 1), (2, 2)}

    def test_max_runs_resume(self, config_path, output_dir):
        assert main(["--config", config_path, "preload", "redis"]) == EXIT_OK
        assert main(["--config", config_path, "sweep", "redis", "--max-runs", "2"]) == EXIT_OK
        store = ResultStore("redis", "tiny", output_dir)
        assert store.completed_cells() == {(1, 1), (1, 2)}

        assert main(["--config", config_path, "sweep", "redis", "--max-runs", "2"]) == EXIT_OK
        assert store.completed_cells() == {(1, 1), (1, 2), (2, 1), (2, 2)}

    def test_locked_output(self, config_path, output_dir, caplog):
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / LOCK_FILENAME).write_text("1\n")
        with caplog.at_level(logging.ERROR):
            assert main(["--config", config_path, "sweep", "redis"]) == EXIT_FAILURE
        assert "in use by another run" in caplog.text

    def test_seed_flag_reaches_records(self, config_path, output_dir, mock_server):
        assert main(["--config", config_path, "preload", "redis"]) == EXIT_OK
        argv = ["--config", config_path, "--seed", "0x10", "sweep", "redis", "--max-runs", "1"]
        assert main(argv) == EXIT_OK
        (result,) = ResultStore("redis", "tiny", output_dir).get()
        assert result.seed_record.base_seed == 16


@pytest.mark.unit
class TestCompareCommand:
    def test_invalid_metric(self, config_path, caplog):
        with caplog.at_level(logging.ERROR):
            assert main(["--config", config_path, "compare", "p75"]) == EXIT_USAGE
        assert "valid: throughput, p99, p999" in caplog.text

    def test_baseline_only(self, config_path, stored_results, caplog):
        stored_results("redis")
        with caplog.at_level(logging.ERROR):
            assert main(["--config", config_path, "compare", "throughput"]) == EXIT_FAILURE
        assert "nothing to compare" in caplog.text

    def test_two_systems(self, config_path, stored_results, output_dir, capsys):
        stored_results("redis", "garnet")
        assert main(["--config", config_path, "compare", "throughput"]) == EXIT_OK
        lines = (output_dir / "comparisons.A.throughput.jsonl").read_text().splitlines()
        assert [json.loads(line)["concurrency"] for line in lines] == [50, 100]
        out = capsys.readouterr().out
        assert out.splitlines()[0].split()[0] == "workload"
        assert "garnet" in out


@pytest.mark.unit
class TestReportCommand:
    def test_no_results(self, config_path, caplog):
        with caplog.at_level(logging.ERROR):
            assert main(["--config", config_path, "report"]) == EXIT_FAILURE
        assert "no results" in caplog.text

    def test_report(self, config_path, stored_results, output_dir, capsys):
        stored_results("redis", "garnet")
        assert main(["--config", config_path, "report"]) == EXIT_OK
        assert "Performance summary normalized to redis" in capsys.readouterr().out
        summary = (output_dir / "summary.csv").read_bytes()
        assert b"garnet,throughput-write" in summary
        assert (output_dir / "plot.A.throughput.csv").is_file()
        notes = (output_dir / "summary.txt").read_text()
        assert f"preload key count: {KEYS:,} exact" in notes
        assert "workload tiny: the hottest 1 of 100 keys" in notes
