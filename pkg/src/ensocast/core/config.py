"""Run configuration: one YAML file with a mapping per section."""

from collections.abc import Iterator, Mapping
from logging import getLogger
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, model_validator
from ruamel.yaml.error import YAMLError

from ensocast.core.base import Serializable
from ensocast.core.constants import DEFAULT_THRESHOLD, MAX_LEAD_MONTHS
from ensocast.core.data import GridSpec, SynthesisConfig
from ensocast.core.exceptions import ConfigError
from ensocast.core.experiments import TrainSpec
from ensocast.core.model import ModelConfig
from ensocast.utils.base import load_yaml
from ensocast.utils.types import PathLike

logger = getLogger(__name__)


class AttributionConfig(Serializable):
    """Attribution method and its parameters."""

    method: Literal["pptv", "perturbation", "vbp", "gradcam"] = Field("pptv", description="Attribution method.")
    channels: Literal["mean", "per"] = Field("mean", description="Cross-channel mean or one map per channel.")
    patch: tuple[int, int] = Field((2, 2), description="Occlusion patch extents (lat, lon).")
    stride: int = Field(1, ge=1, description="Occlusion patch stride.")
    fill: float = Field(0.0, description="Occlusion fill value (0 is climatology in anomaly space).")
    threshold: float = Field(DEFAULT_THRESHOLD, gt=0.0, le=1.0, description="Important-region threshold.")
    top_fraction: float = Field(0.1, gt=0.0, le=1.0, description="Top share of cells used for localization.")
    explain_samples: Optional[int] = Field(None, ge=1, description="Cap on samples explained (all when unset).")


class ExportConfig(Serializable):
    """Output locations and formats."""

    out_dir: Path = Field(Path("outputs"), description="Output directory, relative to the config file.")
    pgm: bool = Field(True, description="Write graymaps next to saliency CSV files.")
    report: bool = Field(True, description="Write a key=value experiment report.")


class SweepConfig(Serializable):
    """Cells of the sweep subcommand."""

    mode: Literal["lead", "month"] = Field("lead", description="Sweep over leads or over target months.")
    leads: list[int] = Field(default_factory=lambda: list(range(1, 17)), description="Leads of a lead sweep.")
    lead: int = Field(4, ge=1, le=MAX_LEAD_MONTHS, description="Fixed lead of a month sweep.")
    months: list[int] = Field(default_factory=lambda: list(range(1, 13)), description="Months of a month sweep.")

    @model_validator(mode="after")
    def _check_ranges(self) -> "SweepConfig":
        if not self.leads or any(not 1 <= v <= MAX_LEAD_MONTHS for v in self.leads):
            raise ValueError(f"leads must be non-empty and within 1..{MAX_LEAD_MONTHS}")
        if not self.months or any(not 1 <= v <= 12 for v in self.months):
            raise ValueError("months must be non-empty and within 1..12")
        return self


class RuntimeConfig(Serializable):
    """Process-level knobs."""

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field("INFO", description="Root log level.")
    workers: int = Field(4, ge=1, description="Attribution worker threads (outputs do not depend on it).")


SECTIONS: dict[str, type[Serializable]] = {
    "grid": GridSpec,
    "synthesis": SynthesisConfig,
    "model": ModelConfig,
    "train": TrainSpec,
    "attribution": AttributionConfig,
    "export": ExportConfig,
    "sweep": SweepConfig,
    "runtime": RuntimeConfig,
}


class RunConfig(Serializable):
    """Every section of a run; unknown sections and keys are rejected."""

    grid: GridSpec = Field(default_factory=GridSpec)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSpec = Field(default_factory=TrainSpec)
    attribution: AttributionConfig = Field(default_factory=AttributionConfig)
    export: ExportConfig = Field(default_factory=ExportConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)

    @model_validator(mode="before")
    @classmethod
    def _grid_into_model(cls, raw: Any) -> Any:
        """The model section takes its input extents from the grid section."""
        if not isinstance(raw, Mapping):
            return raw
        grid = raw.get("grid") or {}
        if isinstance(grid, BaseModel):
            grid = grid.model_dump()
        model = raw.get("model") or {}
        if isinstance(model, BaseModel):
            model = model.model_dump()
        if not isinstance(grid, Mapping) or not isinstance(model, Mapping):
            return raw
        merged = dict(model)
        for key in ("nlat", "nlon"):
            extent = grid.get(key, GridSpec.model_fields[key].default)
            if key in merged and merged[key] != extent:
                raise ValueError(f"model.{key}={merged[key]} disagrees with grid.{key}={extent}")
            merged[key] = extent
        return {**raw, "model": merged}

    def with_seed(self, seed: int) -> "RunConfig":
        """Same configuration with the model and training seeds set to ``seed``."""
        return self.model_copy(
            update={
                "model": self.model.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
            }
        )

    def sections(self) -> dict[str, dict[str, Any]]:
        """Section name to JSON-compatible ``key: value`` mapping."""
        return {name: getattr(self, name).model_dump(mode="json") for name in SECTIONS}


def load_run_config(path: Optional[PathLike]) -> RunConfig:
    """Load a YAML run configuration; paths resolve against the file's directory.

    ``None`` yields the defaults with paths relative to the working directory.

    Raises:
        ConfigError: If the file is not a mapping of sections or a value is invalid; the message names the key.
    """
    if path is None:
        return RunConfig()
    file = Path(path)
    try:
        raw = load_yaml(file)
    except YAMLError as err:
        raise ConfigError(f"{file} is not valid YAML: {err}") from err
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{file} must hold a mapping of sections, got {type(raw).__name__}")
    for name, section in raw.items():
        if section is not None and not isinstance(section, Mapping):
            raise ConfigError(f"Section [{name}] in {file} must be a mapping of keys")
    config = RunConfig.parse({k: v for k, v in raw.items() if v is not None})
    out_dir = config.export.out_dir
    if not out_dir.is_absolute():
        export = config.export.model_copy(update={"out_dir": (file.parent / out_dir).resolve()})
        config = config.model_copy(update={"export": export})
    logger.debug(f"Loaded run config from {file}")
    return config


def describe_keys() -> Iterator[str]:
    """``[section] key = default: description`` for every configurable key."""
    for name, section in SECTIONS.items():
        for key, info in section.model_fields.items():
            default = info.get_default(call_default_factory=True)
            yield f"[{name}] {key} = {default}: {info.description or ''}".rstrip(": ")


__all__ = [
    "SECTIONS",
    "AttributionConfig",
    "ExportConfig",
    "RunConfig",
    "RuntimeConfig",
    "SweepConfig",
    "describe_keys",
    "load_run_config",
]
