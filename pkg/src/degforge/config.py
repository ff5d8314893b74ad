"""Run configuration schema.  Unknown keys are rejected at every level."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from degforge.toyworld import DegradationKind


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ToyworldSection(Strict):
    size: int = Field(32, ge=16)
    scenes_per_degradation: int = Field(60, ge=1)
    degradations: list[str] = Field(default_factory=lambda: [k.value for k in DegradationKind])
    severity_range: tuple[float, float] = (0.1, 0.9)
    held_out_per_degradation: int = Field(8, ge=0)

    @field_validator("degradations")
    @classmethod
    def _known(cls, v: list[str]) -> list[str]:
        for k in v:
            DegradationKind.parse(k)
        return v


class CodecSection(Strict):
    mode: Literal["learned", "identity"] = "learned"
    f: int = 4
    c: int = 4
    width: int = 32
    steps: int = Field(1200, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(5e-3, gt=0)


class GeneratorSection(Strict):
    T: int = Field(200, ge=1)
    schedule: Literal["linear", "cosine"] = "linear"
    channels: tuple[int, int, int] = (32, 64, 96)
    steps: int = Field(4000, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    cond_dropout: float = Field(0.05, ge=0, le=1)
    checkpoint: Optional[str] = None


class SCMSection(Strict):
    width: int = 32
    steps: int = Field(600, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)


class SynthSection(Strict):
    s_img: float = Field(1.5, ge=0)
    s_text: float = Field(7.5, ge=0)
    sampling_steps: int = Field(20, ge=1)
    random_sigma_rate: float = Field(1 / 20, ge=0, le=1)
    thresholds: dict[str, Optional[float]] = Field(default_factory=dict)
    max_images: Optional[int] = Field(60, ge=0)

    @field_validator("thresholds")
    @classmethod
    def _known(cls, v: dict) -> dict:
        for k in v:
            DegradationKind.parse(k)
        return v


class RestoreSection(Strict):
    epochs: int = Field(4, ge=1)
    lr: float = Field(2e-4, gt=0)
    warmup_epochs: int = Field(1, ge=0)
    batch_size: int = Field(16, ge=1)
    decoder_kernel: Literal[1, 3] = 3
    regime: Literal["existing", "generated", "combined"] = "combined"


class EvalSection(Strict):
    wasserstein_projections: int = Field(128, ge=1)


class RunConfig(Strict):
    seed: int = 0
    workers: int = Field(1, ge=1)
    out: str = "runs/toy"
    overwrite: bool = False
    toyworld: ToyworldSection = Field(default_factory=ToyworldSection)
    codec: CodecSection = Field(default_factory=CodecSection)
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    scm: SCMSection = Field(default_factory=SCMSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    restore: RestoreSection = Field(default_factory=RestoreSection)
    eval: EvalSection = Field(default_factory=EvalSection)


class ConfigError(ValueError):
    """Schema violation; ``errors`` holds ``(key.path, message)`` tuples."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {m}" for k, m in errors))


def validate(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError([(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in exc.errors()]) from None


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        doc = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
        if not isinstance(doc, dict):
            raise ConfigError([("<root>", "config must be a mapping")])
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    return validate(doc)
