import importlib
import subprocess
import sys

import pytest

MODULES = [
    "kvbench",
    "kvbench.cli",
    "kvbench.config",
    "kvbench.exceptions",
    "kvbench.metrics",
    "kvbench.mock_server",
    "kvbench.recorder",
    "kvbench.report",
    "kvbench.resp",
    "kvbench.stats",
    "kvbench.structs",
    "kvbench.workload",
    "kvbench.zipf",
]


@pytest.mark.unit
class TestPackageImport:
    def test_fresh_interpreter_imports_every_module(self):
        code = "; ".join(f"import {name}" for name in MODULES)
        completed = subprocess.run(
            [sys.executable, "-c", code], capture_output=True, text=True, timeout=60
        )
        assert completed.returncode == 0, completed.stderr

    def test_exports_resolve(self):
        package = importlib.import_module("kvbench")
        for name in package.__all__:
            assert hasattr(package, name), name

    def test_result_store_annotations(self):
        from kvbench.recorder import ResultStore

        assert ResultStore.load_all.__annotations__["return"] == list[
            importlib.import_module("kvbench.structs").RunResult
        ]
