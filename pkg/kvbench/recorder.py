import json
import logging
import os
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from pydantic import ValidationError

from .exceptions import OutputLockedError
from .structs import SCHEMA_VERSION, RunResult, TTestReport

logger = logging.getLogger()

RESULTS_SUFFIX = ".results.jsonl"
LOCK_FILENAME = ".kvbench.lock"
DEFAULT_OUTPUT_DIR = "results"


def get_output_dir() -> str:
    """Get the results directory from the environment, or the default."""
    return os.environ.get("KVBENCH_OUTPUT", DEFAULT_OUTPUT_DIR)


class ResultStore:
    """Append-only run results for one (system, workload), one JSON object per line."""

    def __init__(
        self,
        system: str,
        workload: str,
        output_dir: Union[str, Path, None] = None,
    ) -> None:
        self.system = system
        self.workload = workload
        self.output_dir = Path(output_dir if output_dir is not None else get_output_dir())
        self.filename = self.output_dir / f"{system}.{workload}{RESULTS_SUFFIX}"
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def record(self, result: RunResult) -> None:
        """Append one result; the line is flushed to disk before returning."""
        line = result.model_dump_json() + "\n"
        with open(self.filename, "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())

    def get(self) -> list[RunResult]:
        """Every readable record in file order.

        A torn final line (crash mid-write) is skipped with a warning.
        """
        if not self.filename.is_file():
            return []

        results: list[RunResult] = []
        with open(self.filename, "r", encoding="utf-8") as f:
            lines = f.readlines()
        for number, line in enumerate(lines, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError:
                where = "truncated last line" if number == len(lines) else f"line {number}"
                logger.warning(f"{self.filename}: skipping {where}")
                continue
            if raw.get("schema_version") != SCHEMA_VERSION:
                logger.warning(
                    f"{self.filename}:{number}: schema_version "
                    f"{raw.get('schema_version')} not supported, skipped"
                )
                continue
            try:
                results.append(RunResult.model_validate(raw))
            except ValidationError as e:
                logger.warning(f"{self.filename}:{number}: invalid record: {e}")
        return results

    def latest(self) -> list[RunResult]:
        """One record per (concurrency, repetition), the last written wins."""
        cells: dict[tuple[int, int], RunResult] = {}
        for result in self.get():
            cells[result.cell] = result
        return [cells[cell] for cell in sorted(cells)]

    def completed_cells(self) -> set[tuple[int, int]]:
        """Cells holding a successful run; failed cells are retried on resume."""
        return {r.cell for r in self.latest() if not r.failed}

    def __repr__(self) -> str:
        return f"<ResultStore system={self.system} workload={self.workload} file={self.filename}>"

    @classmethod
    def list_files(cls, output_dir: Union[str, Path, None] = None) -> list[str]:
        directory = Path(output_dir if output_dir is not None else get_output_dir())
        if not directory.is_dir():
            return []
        return sorted(f.name for f in directory.iterdir() if f.name.endswith(RESULTS_SUFFIX))

    @classmethod
    def parse_filename(cls, filename: str) -> tuple[str, str]:
        """
        Example filename: redis.A.results.jsonl
        Returns: ("redis", "A")
        """
        stem = filename[: -len(RESULTS_SUFFIX)] if filename.endswith(RESULTS_SUFFIX) else filename
        system, _, workload = stem.rpartition(".")
        return system, workload

    @classmethod
    def load_all(
        cls,
        output_dir: Union[str, Path, None] = None,
        workload: Optional[str] = None,
    ) -> list[RunResult]:
        results: list[RunResult] = []
        for filename in cls.list_files(output_dir):
            system, name = cls.parse_filename(filename)
            if workload is not None and name != workload:
                continue
            results.extend(cls(system, name, output_dir).latest())
        return results


def write_comparisons(
    output_dir: Union[str, Path],
    workload: str,
    metric: str,
    reports: Iterable[TTestReport],
) -> Path:
    """Rewrite comparisons.<workload>.<metric>.jsonl with the given reports."""
    path = Path(output_dir) / f"comparisons.{workload}.{metric}.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for report in reports:
            f.write(report.model_dump_json() + "\n")
    return path


class OutputLock:
    """Exclusive claim on an output directory via an O_EXCL lock file."""

    def __init__(self, output_dir: Union[str, Path]) -> None:
        self.path = Path(output_dir) / LOCK_FILENAME
        self.held = False

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            raise OutputLockedError(
                f"{self.path.parent} is in use by another run (remove {self.path} if stale)"
            )
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self.held = True

    def release(self) -> None:
        if self.held:
            self.path.unlink(missing_ok=True)
            self.held = False

    def __enter__(self) -> "OutputLock":
        self.acquire()
        return self

    def __exit__(self, *args: Any) -> None:
        self.release()
