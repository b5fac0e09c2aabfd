"""Pipeline configuration document (YAML) with a strict schema."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .segresnet import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class InferenceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    window: Optional[tuple[int, int, int]] = None  # defaults to the training crop
    overlap: float = Field(0.5, ge=0, lt=1)
    save_probabilities: bool = False


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    manifest: Optional[str] = None


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    paths: PathsConfig = PathsConfig()

    @property
    def window(self) -> tuple[int, int, int]:
        return tuple(self.inference.window or self.train.crop.size)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()


def load_config(path: str | Path | None) -> PipelineConfig:
    """Parse a YAML config; unknown keys anywhere in the document are rejected."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc


def write_resolved(cfg: PipelineConfig, out_dir: str | Path, name: str = "config.resolved.yaml") -> Path:
    """Persist the fully-resolved config and its content hash next to run outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    doc = {"config_sha256": cfg.content_hash(), **cfg.resolved()}
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path
