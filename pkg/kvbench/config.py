import logging
import os
import re
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from .exceptions import ConfigError, InvalidParameterError
from .metrics import BUILTIN_SCHEMAS
from .structs import MAX_SEED, BenchmarkConfig, InfoSchema, Target, WorkloadSpec
from .workload import builtin_workload, compute_preload_keycount

logger = logging.getLogger()

ENV_PREFIX = "KVBENCH_"


def _env(name: str) -> Optional[str]:
    value = os.environ.get(f"{ENV_PREFIX}{name}")
    return value if value else None


def env_flag(name: str) -> bool:
    return (_env(name) or "False").lower() in ("1", "true", "yes")


def parse_seed(raw: Union[str, int]) -> int:
    """Decimal or 0x-prefixed unsigned 64-bit seed."""
    try:
        seed = int(raw, 0) if isinstance(raw, str) else int(raw)
    except ValueError:
        raise InvalidParameterError(f"seed must be an integer, got '{raw}'")
    if not 0 <= seed <= MAX_SEED:
        raise InvalidParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
    return seed


def _password_variable(system: str) -> str:
    return f"{ENV_PREFIX}{re.sub(r'[^A-Za-z0-9]', '_', system).upper()}_PASSWORD"


def load_config(
    path: Union[str, Path, None] = None,
    output: Union[str, Path, None] = None,
) -> BenchmarkConfig:
    """Read a JSON config, then apply environment and flag overrides.

    Flags win over the environment, the environment wins over the file.
    """
    path = path or _env("CONFIG")
    if not path:
        raise ConfigError(f"no config file given (--config or {ENV_PREFIX}CONFIG)")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    try:
        config = BenchmarkConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}")

    targets = []
    for target in config.targets:
        password = os.environ.get(_password_variable(target.system))
        if password:
            endpoint = target.endpoint.model_copy(update={"auth": password})
            target = target.model_copy(update={"endpoint": endpoint})
        targets.append(target)

    update: dict[str, object] = {"targets": targets}
    output = output or _env("OUTPUT")
    if output:
        update["output_dir"] = Path(output)
    config = config.model_copy(update=update)
    logger.debug(f"loaded config {path}: {len(config.targets)} targets")
    return config


def load_workload_file(path: Union[str, Path]) -> WorkloadSpec:
    try:
        return WorkloadSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read workload {path}: {e}")
    except ValidationError as e:
        raise ConfigError(f"invalid workload {path}:\n{e}")


def resolve_workload(
    config: BenchmarkConfig,
    name: Optional[str] = None,
    seed: Optional[int] = None,
) -> WorkloadSpec:
    """The workload to run: a builtin name, a JSON file, or the configured one."""
    configured = config.workload
    if name is None:
        spec = configured if isinstance(configured, WorkloadSpec) else None
        name = configured if isinstance(configured, str) else None
    elif isinstance(configured, WorkloadSpec) and configured.name == name:
        spec = configured
    else:
        spec = None

    if spec is None:
        assert name is not None
        if name.endswith(".json"):
            spec = load_workload_file(name)
        else:
            try:
                spec = builtin_workload(name)
            except InvalidParameterError as e:
                raise ConfigError(str(e))
            # builtin key spaces follow the configured memory pressure
            key_count = compute_preload_keycount(
                config.memory_budget,
                config.target_fill,
                spec.value_size,
                config.overhead_per_key,
            )
            spec = spec.model_copy(update={"key_count": key_count})

    if seed is None and _env("SEED"):
        seed = parse_seed(_env("SEED") or "0")
    if seed is not None:
        spec = spec.model_copy(update={"base_seed": seed})
    return spec


def resolve_schema(target: Target) -> InfoSchema:
    schema = target.info_schema
    if isinstance(schema, InfoSchema):
        return schema
    if isinstance(schema, str):
        try:
            return BUILTIN_SCHEMAS[schema.lower()]
        except KeyError:
            raise ConfigError(
                f"unknown info schema '{schema}' (builtin: {', '.join(BUILTIN_SCHEMAS)})"
            )
    return BUILTIN_SCHEMAS.get(target.system.lower(), InfoSchema())
