"""
Configuration module for the retina latent-code pipeline.

Runtime settings (service name, environment, log level) come from an
optional .env file. Pipeline parameters come from a JSON document with the
sections data, train, cluster and paths; unknown keys are rejected.
"""

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

from dotenv import load_dotenv

from .clustering import DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_TOL
from .datagen import DEFAULT_AGE_CAP, Disease, DiseaseModel, load_disease_models
from .exceptions import ConfigurationError
from .trainer import TrainConfig

VALID_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

T = TypeVar("T")


@dataclass
class Settings:
    """Runtime settings loaded from environment variables."""

    service_name: str = "retina-vae"
    environment: str = "development"
    log_level: str = "INFO"

    def validate(self) -> None:
        """Validate settings values.

        Raises:
            ConfigurationError: If a value is empty or the log level is unknown
        """
        if self.log_level.upper() not in VALID_LOG_LEVELS:
            raise ConfigurationError(
                f"Invalid LOG_LEVEL: {self.log_level}. "
                f"Must be one of: {', '.join(VALID_LOG_LEVELS)}",
                context={"key": "LOG_LEVEL"},
            )
        for name, value in (("SERVICE_NAME", self.service_name), ("ENVIRONMENT", self.environment)):
            if not value or not value.strip():
                raise ConfigurationError(f"{name} cannot be empty", context={"key": name})


def load_settings(env_file: Optional[Path] = None) -> Settings:
    """Load settings from the environment, after reading a .env file if present.

    Args:
        env_file: Path to a .env file. If None, ./.env is used when it exists.

    Returns:
        Validated settings

    Raises:
        ConfigurationError: If an explicit env_file is missing or a value is invalid
    """
    if env_file is None:
        candidate = Path.cwd() / ".env"
        if candidate.exists():
            load_dotenv(candidate)
    else:
        env_file = Path(env_file)
        if not env_file.exists():
            raise ConfigurationError(
                f".env file not found: {env_file}",
                context={"env_file": str(env_file)},
            )
        load_dotenv(env_file)

    settings = Settings(
        service_name=os.getenv("SERVICE_NAME", "retina-vae"),
        environment=os.getenv("ENVIRONMENT", "development"),
        log_level=os.getenv("LOG_LEVEL", "INFO"),
    )
    settings.validate()
    return settings


@dataclass
class DataConfig:
    """Cohort synthesis: partial DiseaseModel overrides keyed by disease code."""

    models: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    per_disease_count: int = 1000
    seed: int = 0
    age_cap: float = DEFAULT_AGE_CAP

    def disease_models(self) -> Dict[Disease, DiseaseModel]:
        return load_disease_models(self.models)


@dataclass
class ClusterConfig:
    k: int = DEFAULT_K
    seed: int = 0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    restarts: int = 1
    elbow_k_max: int = 20


@dataclass
class PathsConfig:
    """Artifact file names; relative names resolve against output_dir."""

    output_dir: str = "."
    cohort: str = "cohort.csv"
    weights: str = "weights.json"
    history: str = "loss_history.csv"
    latents: str = "latents.csv"
    centroids: str = "centroids.csv"
    elbow: str = "elbow.csv"
    report_dir: str = "report"
    figures_dir: str = "figures"
    samples: str = "samples.csv"

    def resolve(self, name: str) -> Path:
        path = Path(name)
        return path if path.is_absolute() else Path(self.output_dir) / path


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        """Check every section.

        Raises:
            ConfigurationError: On an out-of-range pipeline value
            InvalidModelError: If a disease model override is invalid
            ValidationError: If a training hyperparameter is out of range
        """
        if self.data.per_disease_count < 1:
            raise ConfigurationError(
                f"data.per_disease_count must be at least 1, got {self.data.per_disease_count}",
                context={"key": "data.per_disease_count"},
            )
        if self.data.age_cap <= 0:
            raise ConfigurationError(
                f"data.age_cap must be positive, got {self.data.age_cap}",
                context={"key": "data.age_cap"},
            )
        self.data.disease_models()
        self.train.validate()
        cluster_checks = {
            "cluster.k": self.cluster.k >= 1,
            "cluster.tol": self.cluster.tol >= 0,
            "cluster.max_iter": self.cluster.max_iter >= 1,
            "cluster.restarts": self.cluster.restarts >= 1,
            "cluster.elbow_k_max": self.cluster.elbow_k_max >= 1,
        }
        for key, ok in cluster_checks.items():
            if not ok:
                name = key.split(".")[1]
                raise ConfigurationError(
                    f"{key} is out of range: {getattr(self.cluster, name)}",
                    context={"key": key},
                )


def _build_section(cls: Type[T], values: Any, prefix: str) -> T:
    if not isinstance(values, Mapping):
        raise ConfigurationError(
            f"Config section '{prefix}' must be an object",
            context={"key": prefix},
        )
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(
            f"Unknown config key(s): {', '.join(f'{prefix}.{k}' for k in unknown)}",
            context={"keys": [f"{prefix}.{k}" for k in unknown]},
        )
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"Invalid section '{prefix}': {exc}", context={"key": prefix})


def pipeline_config_from_dict(payload: Mapping[str, Any]) -> PipelineConfig:
    """Build a PipelineConfig from parsed JSON; missing keys keep their defaults.

    Raises:
        ConfigurationError: On unknown keys at any level
    """
    if not isinstance(payload, Mapping):
        raise ConfigurationError("Pipeline config must be a JSON object")
    sections = {"data": DataConfig, "train": TrainConfig, "cluster": ClusterConfig, "paths": PathsConfig}
    unknown = sorted(set(payload) - set(sections))
    if unknown:
        raise ConfigurationError(
            f"Unknown config key(s): {', '.join(unknown)}",
            context={"keys": unknown},
        )
    built = {
        name: _build_section(cls, payload[name], name)
        for name, cls in sections.items()
        if name in payload
    }
    config = PipelineConfig(**built)

    # disease overrides are checked field by field before any command runs
    for code, values in config.data.models.items():
        if not isinstance(values, Mapping):
            raise ConfigurationError(
                f"data.models.{code} must be an object",
                context={"key": f"data.models.{code}"},
            )
    config.data.disease_models()
    return config


def load_pipeline_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Read the JSON pipeline config, or return defaults when path is None.

    Raises:
        ConfigurationError: If the file is missing, not JSON, or has unknown keys
    """
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(
            f"Config file not found: {path}",
            context={"config_path": str(path)},
        )
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"Config file {path} is not valid JSON (line {exc.lineno}): {exc.msg}",
            context={"config_path": str(path), "line": exc.lineno},
        )
    return pipeline_config_from_dict(payload)


def apply_overrides(config: PipelineConfig, **overrides: Any) -> PipelineConfig:
    """Return a copy with CLI flag values applied; None means 'not given'.

    Recognised keys: seed, per_disease, epochs, latent_dim, k, out.
    --seed sets the data, train and cluster seeds together. train.age_cap
    always follows data.age_cap.
    """
    data, train, cluster, paths = config.data, config.train, config.cluster, config.paths
    seed = overrides.get("seed")
    if seed is not None:
        data = replace(data, seed=seed)
        train = replace(train, seed=seed)
        cluster = replace(cluster, seed=seed)
    if overrides.get("per_disease") is not None:
        data = replace(data, per_disease_count=overrides["per_disease"])
    if overrides.get("epochs") is not None:
        train = replace(train, epochs=overrides["epochs"])
    if overrides.get("latent_dim") is not None:
        train = replace(train, latent_dim=overrides["latent_dim"])
    if overrides.get("k") is not None:
        cluster = replace(cluster, k=overrides["k"])
    if overrides.get("out") is not None:
        paths = replace(paths, output_dir=str(overrides["out"]))
    train = replace(train, age_cap=data.age_cap)
    return PipelineConfig(data=data, train=train, cluster=cluster, paths=paths)
