from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import GdaFlowError

_ENV_PATTERN = re.compile(r"\$\{([A-Z0-9_]+)\}")

Activation = Literal["tanh", "softplus", "relu", "identity"]


class GdaFlowSettings(BaseSettings):
    """Process-level settings read from GDAFLOW_* environment variables."""

    log_level: str = Field(default="INFO", description="Log level (e.g., INFO, DEBUG)")
    log_file: str | None = Field(default=None, description="Optional path to a log file")
    threads: int = Field(
        default=1, ge=1, description="Upper bound on parallel alpha candidates (GDAFLOW_THREADS)"
    )
    config_file: str | None = Field(
        default=None, description="YAML run configuration used when --config is not given"
    )
    out_dir: str = Field(default="runs", description="Default output directory")

    model_config = SettingsConfigDict(env_prefix="GDAFLOW_", case_sensitive=False)


class FlowConfig(BaseModel):
    """Hyperparameters of the velocity field and of the joint flow trainer."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # five dense layers of 64 units: four hidden plus the output projection
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    activation: Activation = "tanh"
    gamma: float = Field(default=5.0, ge=0.0)
    m: int = Field(default=4, ge=2)
    steps_per_unit_time: int = Field(default=16, ge=1)
    block_count: int = Field(default=1, ge=1)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    seed: int = 0

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(width <= 0 for width in value):
            raise ValueError("hidden widths must be positive")
        return value


class ClassifierConfig(BaseModel):
    """Hyperparameters of h_theta and of every (self-)training fit."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden: tuple[int, ...] = (32, 32)
    activation: Activation = "relu"
    weight_decay: float = Field(default=0.001, ge=0.0)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch_norm: bool = False
    lr: float = Field(default=1e-3, gt=0.0)
    steps: int = Field(default=500, ge=1)
    batch_size: int = Field(default=128, ge=1)
    warm_start: bool = True
    confidence_threshold: float | None = Field(default=None, gt=0.0, le=1.0)
    seed: int = 0

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(width <= 0 for width in value):
            raise ValueError("hidden widths must be positive")
        return value


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    generator: Literal["two-moons", "blobs"] | None = "two-moons"
    manifest: str | None = None
    n: int = Field(default=400, ge=2)
    noise_sd: float = Field(default=0.1, ge=0.0)
    angles_deg: tuple[float, ...] = (0.0, 40.0, 80.0)
    class_count: int = Field(default=3, ge=2)
    shared_cloud: bool = False


class RunConfig(BaseModel):
    """Everything one reproducible run depends on."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    data: DataConfig = DataConfig()
    flow: FlowConfig = FlowConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    alphas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.5, 0.8, 1.0)
    n_generate: int | None = Field(default=None, ge=1)
    reverse_mode: Literal["symmetric", "real"] = "symmetric"

    @field_validator("alphas")
    @classmethod
    def _positive_alphas(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not value:
            raise ValueError("alphas must not be empty")
        if any(alpha <= 0 for alpha in value):
            raise ValueError("alphas must be > 0")
        return value


def _expand_env_value(value: str) -> str:
    def _repl(match: re.Match[str]) -> str:
        var = match.group(1)
        if var not in os.environ:
            raise GdaFlowError(
                f"Missing required environment variable '{var}' referenced in config YAML",
                code="CONFIG_ERROR",
                context={"variable": var},
            )
        return os.environ[var]

    if "${" in value:
        return _ENV_PATTERN.sub(_repl, value)
    return value


def _expand_env(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _expand_env(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_expand_env(v) for v in obj]
    if isinstance(obj, str):
        return _expand_env_value(obj)
    return obj


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        elif isinstance(value, dict):
            merged[key] = _merge({}, value)
        else:
            merged[key] = value
    return merged


def _compact_errors(exc: ValidationError) -> str:
    # no input values: configs may carry paths or env-expanded secrets
    return "; ".join(
        f"{'.'.join(str(loc) for loc in err['loc'])}: {err['msg']}"
        for err in exc.errors(include_input=False, include_url=False)
    )


def load_run_config(
    config_file: str | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Build a RunConfig with precedence CLI overrides > YAML file > model defaults."""

    raw: dict[str, Any] = {}
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise GdaFlowError(
                f"Config file not found: {config_file}",
                code="CONFIG_ERROR",
                context={"path": config_file},
            )
        with path.open("r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise GdaFlowError("Invalid config YAML: expected a mapping", code="CONFIG_ERROR")
        raw = _expand_env(loaded)

    merged = _merge(raw, overrides or {})
    try:
        return RunConfig(**merged)
    except ValidationError as exc:
        raise GdaFlowError(
            f"Invalid run configuration: {_compact_errors(exc)}",
            code="CONFIG_ERROR",
        ) from exc


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


__all__ = [
    "ClassifierConfig",
    "DataConfig",
    "FlowConfig",
    "GdaFlowSettings",
    "RunConfig",
    "config_hash",
    "load_run_config",
]
