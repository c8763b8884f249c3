"""Experiment configuration: one YAML file per experiment, validated before any work starts.

Every leaf can be overridden from the command line with a dotted path, e.g.
``--set train.stage=sep --set stages.sep.preset=S``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .degrade import DistortionRecipe, default_recipe, load_recipe
from .errors import ConfigurationError, InvalidArgumentError
from .losses.composite import MAFT_PRESETS, METRIC_TERMS
from .losses.spectral import LossWeights
from .nets.gridnet import PRESETS, GridNetConfig
from .trainer import SCHEDULES, TrainSchedule

DEVICE_ENV = "TRISTAGE_DEVICE"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Strict):
    manifest: Optional[str] = None  # clean speech manifest (simulate, train)
    simulated_dir: str = "out/simulated"
    checkpoint_dir: str = "out/checkpoints"
    train_dir: str = "out/train"


class NetConfig(_Strict):
    preset: Literal["S", "L"] = "S"
    overrides: Dict[str, int] = Field(default_factory=dict)

    def build(self) -> GridNetConfig:
        base = PRESETS[self.preset].to_dict()
        unknown = set(self.overrides) - set(base)
        if unknown:
            raise ValueError(f"unknown GridNet fields {sorted(unknown)}")
        base.update(self.overrides)
        return GridNetConfig(**base)


class StagesConfig(_Strict):
    fill: NetConfig = NetConfig(preset="S")
    sep: NetConfig = NetConfig(preset="L")
    res: NetConfig = NetConfig(preset="S")


class ScheduleConfig(_Strict):
    batch_per_device: int
    utt_len_s: float
    total_steps: int
    warmup_steps: int
    min_lr: float
    max_lr: float


class TrainSection(_Strict):
    stage: Literal["fill", "sep", "res"] = "fill"
    phase: Literal["base", "maft", "saft", "jft"] = "base"
    schedule: str | ScheduleConfig = "fill"
    maft: str | List[str] = "none"
    disc_width: float = 1.0
    val_utterances: int = 0
    checkpoint_every: int = 0
    resume: Optional[str] = None
    export_as: Optional[str] = None  # file name under checkpoint_dir; default <stage>.pt / <stage>_<phase>.pt

    @field_validator("schedule")
    @classmethod
    def _known_schedule(cls, v):
        if isinstance(v, str) and v not in SCHEDULES:
            raise ValueError(f"unknown schedule preset {v!r}; choose from {sorted(SCHEDULES)}")
        return v

    @field_validator("maft")
    @classmethod
    def _known_terms(cls, v):
        if isinstance(v, str):
            if v not in MAFT_PRESETS:
                raise ValueError(f"unknown metric-aware preset {v!r}")
        elif set(v) - set(METRIC_TERMS):
            raise ValueError(f"unknown metric-aware terms {sorted(set(v) - set(METRIC_TERMS))}")
        return v

    @model_validator(mode="after")
    def _phase_fits_stage(self):
        if self.phase == "jft" and self.stage == "sep":
            raise ValueError("jft needs a stage with discriminators (fill or res)")
        return self


class EnhanceSection(_Strict):
    bwai: bool = False
    stages: List[Literal["fill", "sep", "res"]] = ["fill", "sep", "res"]
    normalize_level: bool = True
    workers: int = Field(1, ge=1)


class EvaluateSection(_Strict):
    metrics: List[str] = ["sdr", "mcd", "lsd"]
    adapters: Dict[str, str] = Field(default_factory=dict)  # metric -> command with {ref} / {est}
    workers: int = Field(1, ge=1)


class SimulateSection(_Strict):
    stage: Literal["fill", "sep", "res"] = "sep"
    recipe: Optional[str | dict] = None  # path to a recipe YAML or an inline recipe


class ExperimentConfig(_Strict):
    seed: int = 0
    scale_divisor: float = Field(1.0, ge=1.0)
    paths: PathsConfig = PathsConfig()
    stages: StagesConfig = StagesConfig()
    simulate: SimulateSection = SimulateSection()
    train: TrainSection = TrainSection()
    loss_weights: Dict[str, float] = Field(default_factory=dict)
    enhance: EnhanceSection = EnhanceSection()
    evaluate: EvaluateSection = EvaluateSection()

    @field_validator("loss_weights")
    @classmethod
    def _known_weights(cls, v):
        unknown = set(v) - set(LossWeights.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        LossWeights(**v)  # range checks
        return v

    @model_validator(mode="after")
    def _nets_build(self):
        for name in ("fill", "sep", "res"):
            getattr(self.stages, name).build()
        r = self.simulate.recipe
        if isinstance(r, dict):
            try:
                rec = DistortionRecipe.from_dict(r)
            except (KeyError, TypeError) as exc:
                raise ValueError(f"bad inline recipe: {exc!r}") from exc
            if rec.stage != self.simulate.stage:
                raise ValueError(f"recipe is for {rec.stage!r} but simulate.stage is {self.simulate.stage!r}")
        return self

    # derived objects ------------------------------------------------------------------

    def gridnet(self, stage: str) -> GridNetConfig:
        return getattr(self.stages, stage).build()

    def weights(self) -> LossWeights:
        return LossWeights(**self.loss_weights)

    def schedule(self) -> TrainSchedule:
        s = self.train.schedule
        sched = SCHEDULES[s] if isinstance(s, str) else TrainSchedule(**s.model_dump())
        return sched.scaled(self.scale_divisor) if self.scale_divisor > 1 else sched

    def recipe(self, stage: str) -> DistortionRecipe:
        r = self.simulate.recipe
        if r is None or (self.simulate.stage != stage):
            return default_recipe(stage)
        if isinstance(r, dict):
            return DistortionRecipe.from_dict(r)
        try:
            return load_recipe(r)
        except OSError as exc:
            raise ConfigurationError(f"cannot read recipe {r}: {exc}") from exc


def _format_errors(exc: ValidationError) -> str:
    lines = [f"{len(exc.errors())} configuration error(s):"]
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "\n".join(lines)


def _parse_value(text: str):
    return yaml.safe_load(text) if text != "" else ""


def apply_overrides(raw: dict, overrides: Tuple[str, ...] | List[str]) -> dict:
    """``a.b.c=value`` assignments; values are parsed as YAML scalars or lists."""
    out = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigurationError(f"override {key!r}: {p!r} is not a section")
            else:
                child = dict(child)
            node[p] = child
            node = child
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    raw = apply_overrides(raw, overrides)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc)) from exc
    except InvalidArgumentError as exc:
        raise ConfigurationError(str(exc)) from exc


def resolve_device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as exc:
        raise ConfigurationError(f"{DEVICE_ENV}={name!r} is not a device") from exc
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ConfigurationError(f"{DEVICE_ENV}={name!r} but CUDA is not available")
    return dev
