# core/run_config.py
"""
YAML run configuration.

Example (``config/default.yaml`` carries the full default document):

    seed: 7
    generator:
      n_scenes: 500
      shift: {base_shift: 3.0, unpaired_rate: 0.125}
    train:
      epochs: 12
    eval:
      metric: mr

Values given on the command line as ``--set section.key=value`` are parsed
as YAML scalars and applied before validation.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from weakalign_det.alignment.jitter import JitterConfig
from weakalign_det.alignment.losses import LossConfig
from weakalign_det.alignment.sampling import (
    DEFAULT_BG_THRESH,
    DEFAULT_FG_THRESH,
    DEFAULT_POSITIVE_FRACTION,
    DEFAULT_ROIS_PER_IMAGE,
)
from weakalign_det.core.config import APP_VERSION, settings
from weakalign_det.core.errors import ConfigurationError
from weakalign_det.data.generator import GeneratorConfig
from weakalign_det.detector.model import ModelConfig
from weakalign_det.evaluation.matching import EvalFilter
from weakalign_det.evaluation.robustness import DIRECTIONS, Metric

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "config.resolved.yaml"
VERSION_FILE = "VERSION"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=12, ge=1)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=0.02, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    lr_decay_factor: float = Field(default=0.1, gt=0.0, le=1.0)
    first_phase_fraction: float = Field(default=2.0 / 3.0, gt=0.0, le=1.0)
    rois_per_image: int = Field(default=DEFAULT_ROIS_PER_IMAGE, ge=1)
    positive_fraction: float = Field(default=DEFAULT_POSITIVE_FRACTION, gt=0.0, le=1.0)
    fg_thresh: float = Field(default=DEFAULT_FG_THRESH, ge=0.0, le=1.0)
    bg_thresh: float = Field(default=DEFAULT_BG_THRESH, ge=0.0, le=1.0)
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    use_jitter: bool = True
    use_asc: bool = True
    val_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    log_every: int = Field(default=20, ge=1)
    grad_clip: float | None = Field(default=10.0, gt=0.0)
    jitter_sigma_grid: list[float] = Field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1, 0.2])


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    metric: Metric = Metric.MR
    filter: EvalFilter = Field(default_factory=lambda: EvalFilter(min_height=10.0))
    score_threshold: float = Field(default=0.0, ge=0.0, le=1.0)
    grid_radius: int = Field(default=6, ge=0)
    max_px: int = Field(default=12, ge=1)
    angles: list[int] = Field(default_factory=lambda: sorted(DIRECTIONS))


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    workers: int = Field(default_factory=lambda: settings.workers, ge=1)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    jitter: JitterConfig = Field(default_factory=JitterConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


def default_config_path() -> Path:
    return settings.resolved_config_dir / "default.yaml"


def load_yaml(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")

    with path.open("r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config file {path} is not valid YAML: {e}") from e

    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping at the top level")
    return data


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` assignments in order; values are YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigurationError(f"override {item!r} has an empty key")

        node = data
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            elif not isinstance(child, dict):
                raise ConfigurationError(f"override {item!r}: {part} is not a section")
            node = child
        node[parts[-1]] = yaml.safe_load(raw)
        logger.debug("Override %s = %r", key, node[parts[-1]])
    return data


def load_run_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = load_yaml(path or default_config_path())
    data = apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration: {e}") from e


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / RESOLVED_CONFIG_FILE).open("w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.model_dump(mode="json"), f, sort_keys=True)
    (out_dir / VERSION_FILE).write_text(f"{APP_VERSION}\n", encoding="utf-8")
