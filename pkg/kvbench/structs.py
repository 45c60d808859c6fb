import math
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional, Union
from urllib.parse import unquote, urlparse

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)

SCHEMA_VERSION = 1
MAX_SEED = (1 << 64) - 1


class KeyScheme(str, Enum):
    IDENTITY_RANK = "identity-rank"
    SEEDED_PERMUTATION = "seeded-permutation"


class KeyMapping(BaseModel):
    """How ranks 1..key_count become key names."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    scheme: KeyScheme = KeyScheme.IDENTITY_RANK
    permutation_seed: int = Field(default=0, ge=0, le=MAX_SEED)
    prefix: str = "key:"
    key_count: int = Field(ge=1)


class Endpoint(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    host: str = "localhost"
    port: int = Field(default=6379, ge=1, le=65535)
    connect_timeout: float = Field(default=1000.0, gt=0, description="milliseconds")
    socket_timeout: float = Field(default=10000.0, gt=0, description="milliseconds")
    auth: Optional[str] = None

    @classmethod
    def from_url(cls, url: str, **kwargs: Any) -> "Endpoint":
        """Parse ``redis://[:password@]host[:port]``."""
        parsed = urlparse(url)
        if parsed.scheme not in ("redis", "tcp"):
            raise ValueError(f"unsupported endpoint scheme '{parsed.scheme}'")
        data: dict[str, Any] = {"host": parsed.hostname or "localhost"}
        if parsed.port:
            data["port"] = parsed.port
        if parsed.password:
            data["auth"] = unquote(parsed.password)
        data.update(kwargs)
        return cls(**data)

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


class WorkloadSpec(BaseModel):
    """One benchmark configuration: op mix, key space, timing and sweep."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    set_ratio: float = Field(ge=0.0, le=1.0)
    get_ratio: float = Field(ge=0.0, le=1.0)
    skew: float = Field(ge=0.0)
    key_count: int = Field(ge=1)
    value_size: int = Field(default=1024, ge=1)
    duration: float = Field(default=300.0, gt=0, description="seconds, warmup included")
    warmup: float = Field(default=60.0, ge=0, description="seconds")
    concurrency_levels: list[int] = Field(min_length=1)
    pipeline_depth: int = Field(default=1, ge=1)
    base_seed: int = Field(default=0, ge=0, le=MAX_SEED)
    cooldown: float = Field(default=10.0, ge=0, description="seconds between runs")
    key_prefix: str = "key:"
    key_scheme: KeyScheme = KeyScheme.IDENTITY_RANK

    @field_validator("concurrency_levels")
    @classmethod
    def _check_levels(cls, v: list[int]) -> list[int]:
        if any(level < 1 for level in v):
            raise ValueError("concurrency levels must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("concurrency levels must be strictly increasing")
        return v

    @model_validator(mode="after")
    def _check_ratios_and_timing(self) -> "WorkloadSpec":
        if abs(self.set_ratio + self.get_ratio - 1.0) > 1e-9:
            raise ValueError("set_ratio + get_ratio must equal 1")
        if self.warmup >= self.duration:
            raise ValueError("warmup must be shorter than duration")
        return self

    @property
    def key_mapping(self) -> KeyMapping:
        return KeyMapping(
            scheme=self.key_scheme,
            permutation_seed=self.base_seed,
            prefix=self.key_prefix,
            key_count=self.key_count,
        )

    @property
    def measured_seconds(self) -> float:
        return self.duration - self.warmup


class PreloadPlan(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    memory_budget: int = Field(gt=0, description="bytes")
    target_fill: float = Field(gt=0.0, le=1.0)
    value_size: int = Field(gt=0)
    overhead_per_key: int = Field(gt=0)

    @computed_field(return_type=int)
    def key_count(self) -> int:
        # fill is taken at its decimal value so 0.75 of 8 GiB stays exact
        return math.floor(
            self.memory_budget
            * Fraction(str(self.target_fill))
            / (self.value_size + self.overhead_per_key)
        )


class PreloadReport(BaseModel):
    key_count: int
    issued: int = 0
    errors: int = 0
    elapsed: float = 0.0
    used_memory: Optional[int] = None

    @computed_field(return_type=bool)
    def failed(self) -> bool:
        return self.errors > 0 or self.issued < self.key_count


class ResourceSource(str, Enum):
    SERVER_INFO = "server-info"
    EXTERNAL_FILE = "external-file"


class ResourceSample(BaseModel):
    timestamp: float = Field(description="seconds from run start")
    cpu_seconds_total: Optional[float] = None
    used_memory: Optional[int] = None
    source: ResourceSource = ResourceSource.SERVER_INFO
    missing: list[str] = Field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.missing)


class InfoSchema(BaseModel):
    """Maps the logical resource fields onto one system's INFO field names."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    sections: list[str] = Field(default_factory=lambda: ["memory", "cpu"])
    cpu_fields: list[str] = Field(
        default_factory=lambda: ["used_cpu_sys", "used_cpu_user"]
    )
    memory_field: str = "used_memory"
    external_file: Optional[Path] = None


class LatencySummary(BaseModel):
    count: int = 0
    p50_us: Optional[float] = None
    p99_us: Optional[float] = None
    p999_us: Optional[float] = None
    mean_us: Optional[float] = None
    max_us: Optional[float] = None


class SeedRecord(BaseModel):
    base_seed: int
    run_seed: int
    value_seed: int
    worker_seeds: list[int] = Field(default_factory=list)


class RunResult(BaseModel):
    """One (system, workload, concurrency, repetition) measurement."""

    schema_version: int = SCHEMA_VERSION
    system: str
    workload: str
    set_ratio: float = 0.0
    concurrency: int = Field(ge=1)
    repetition: int = Field(default=1, ge=1)
    started_at: str = ""
    ops_total: int = 0
    errors_total: int = 0
    elapsed_measured: float = 0.0
    throughput: float = 0.0
    p50_us: Optional[float] = None
    p99_us: Optional[float] = None
    p999_us: Optional[float] = None
    mean_us: Optional[float] = None
    max_us: Optional[float] = None
    op_counts: dict[str, int] = Field(default_factory=dict)
    op_latency: dict[str, LatencySummary] = Field(default_factory=dict)
    get_misses: int = 0
    warmup_ops: int = 0
    ramp: list[int] = Field(default_factory=list)
    commands_sent: int = 0
    replies_received: int = 0
    error_replies: int = 0
    in_flight_at_abort: int = 0
    dropped_connections: int = 0
    latency_overflow: int = 0
    resource_series: list[ResourceSample] = Field(default_factory=list)
    cpu_mean_cores: Optional[float] = None
    mem_mean_bytes: Optional[float] = None
    seed_record: Optional[SeedRecord] = None
    failed: bool = False
    failure_reason: Optional[str] = None

    @model_validator(mode="after")
    def _check_invariants(self) -> "RunResult":
        if self.elapsed_measured > 0:
            expected = self.ops_total / self.elapsed_measured
            if not math.isclose(self.throughput, expected, rel_tol=1e-9, abs_tol=0.0):
                raise ValueError("throughput must equal ops_total / elapsed_measured")
        percentiles = [p for p in (self.p50_us, self.p99_us, self.p999_us) if p is not None]
        if percentiles != sorted(percentiles):
            raise ValueError("percentiles must be non-decreasing")
        return self

    @property
    def cell(self) -> tuple[int, int]:
        return (self.concurrency, self.repetition)

    @property
    def write_heavy(self) -> bool:
        """At least as many SETs as GETs."""
        return self.set_ratio >= 1.0 - self.set_ratio

    def metric(self, name: str) -> Optional[float]:
        if name == "throughput":
            return self.throughput
        if name == "p99":
            return self.p99_us
        if name == "p999":
            return self.p999_us
        raise ValueError(f"unknown metric '{name}'")


class EfficiencyWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    cpu_weight: float = Field(default=0.5, ge=0.0)
    mem_weight: float = Field(default=0.5, ge=0.0)

    @model_validator(mode="after")
    def _check_positive(self) -> "EfficiencyWeights":
        if self.cpu_weight + self.mem_weight <= 0:
            raise ValueError("cpu_weight + mem_weight must be positive")
        return self


class SampleSet(BaseModel):
    label: str
    values: list[float] = Field(min_length=2)
    unit: str = ""


class TTestReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    label_a: str = ""
    label_b: str = ""
    n_a: int
    n_b: int
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float
    standard_error: float
    t_statistic: float
    degrees_of_freedom: float
    p_value: float = Field(ge=0.0, le=1.0)
    significant: bool
    confidence_interval: tuple[float, float]
    degenerate: Optional[str] = None
    workload: Optional[str] = None
    concurrency: Optional[int] = None
    metric: Optional[str] = None

    @property
    def mean_difference(self) -> float:
        return self.mean_a - self.mean_b


class Metric(str, Enum):
    THROUGHPUT = "throughput"
    P99 = "p99"
    P999 = "p999"


class Target(BaseModel):
    model_config = ConfigDict(extra="forbid")

    system: str = Field(min_length=1)
    endpoint: Endpoint
    info_schema: Union[InfoSchema, str, None] = None

    @field_validator("endpoint", mode="before")
    @classmethod
    def _parse_url(cls, v: Any) -> Any:
        if isinstance(v, str):
            return Endpoint.from_url(v)
        return v


class BenchmarkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    targets: list[Target] = Field(min_length=1)
    workload: Union[WorkloadSpec, str] = "A"
    repetitions: int = Field(default=5, ge=1)
    baseline_system: str
    output_dir: Path = Path("results")
    weights: EfficiencyWeights = Field(default_factory=EfficiencyWeights)
    memory_budget: int = Field(default=8 * (1 << 30), gt=0)
    target_fill: float = Field(default=0.75, gt=0.0, le=1.0)
    overhead_per_key: int = Field(default=300, gt=0)
    preload_parallelism: int = Field(default=8, ge=1)
    resource_interval: float = Field(default=5.0, gt=0)

    @model_validator(mode="after")
    def _check_targets(self) -> "BenchmarkConfig":
        systems = [t.system for t in self.targets]
        if len(set(systems)) != len(systems):
            raise ValueError("target system identifiers must be unique")
        if self.baseline_system not in systems:
            raise ValueError(
                f"baseline_system '{self.baseline_system}' is not among the targets"
            )
        return self

    def target(self, system: str) -> Optional[Target]:
        for t in self.targets:
            if t.system == system:
                return t
        return None


class SummaryRow(BaseModel):
    system: str
    metric: str
    mean_system: float
    mean_baseline: float
    delta_pct: float
    p_value: Optional[float] = None
    significant: bool = False
    n_system: int
    n_baseline: int

    @property
    def delta_text(self) -> str:
        return f"{self.delta_pct:+.1f}%"


class SummaryTable(BaseModel):
    baseline_system: str
    rows: list[SummaryRow] = Field(default_factory=list)
