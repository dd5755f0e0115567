"""Versioned model checkpoints."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import torch
from pydantic import ValidationError

from weakalign_det.core.config import APP_VERSION
from weakalign_det.core.errors import ConfigurationError
from weakalign_det.detector.model import ModelConfig, TwoStreamDetector

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(model: TwoStreamDetector, path: str | Path, final_loss: float | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "version": APP_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "config_hash": model.config.config_hash(),
        "state_dict": model.state_dict(),
        "final_loss": final_loss,
    }
    torch.save(payload, path)
    logger.info("Saved checkpoint %s (config %s)", path, payload["config_hash"][:12])


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigurationError(f"{path} is not a schema-{CHECKPOINT_SCHEMA_VERSION} checkpoint")
    return payload


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> TwoStreamDetector:
    payload = read_checkpoint(path)
    try:
        config = ModelConfig.model_validate(payload["model_config"])
    except ValidationError as e:
        raise ConfigurationError(f"checkpoint {path} carries an invalid model config: {e}") from e
    if config.config_hash() != payload["config_hash"]:
        raise ConfigurationError(f"checkpoint {path}: stored config hash does not match its config")
    if expected_hash is not None and expected_hash != payload["config_hash"]:
        raise ConfigurationError(
            f"checkpoint {path} was trained with config {payload['config_hash'][:12]}, "
            f"expected {expected_hash[:12]}"
        )
    model = TwoStreamDetector(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise ConfigurationError(f"checkpoint {path} does not fit the model: {e}") from e
    model.eval()
    logger.info("Loaded checkpoint %s (version %s)", path, payload.get("version"))
    return model
