"""The three stage networks as one unit, plus self-describing checkpoints."""

from __future__ import annotations

import os
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional

import torch
import torch.nn as nn

from ..dsp import DEFAULT_STFT, StftConfig
from ..errors import ConfigurationError
from .gridnet import PRESET_L, PRESET_S, GridNetConfig, StageModel

FORMAT_VERSION = 1
STAGE_FILES = {"fill": "fill.pt", "sep": "sep.pt", "res": "res.pt", "res_finetuned": "res_finetuned.pt"}


class ModelBundle(nn.Module):
    """fill (residual), sep (regression) and res (skip) stage models.

    ``res_finetuned`` is the optional second restoration network used for
    band-limited inputs when bandwidth-aware routing is on.
    """

    def __init__(self, fill: StageModel, sep: StageModel, res: StageModel, res_finetuned: Optional[StageModel] = None):
        super().__init__()
        self.fill, self.sep, self.res = fill, sep, res
        self.res_finetuned = res_finetuned

    @classmethod
    def build(
        cls,
        fill_cfg: GridNetConfig = PRESET_S,
        sep_cfg: GridNetConfig = PRESET_L,
        res_cfg: GridNetConfig = PRESET_S,
        with_finetuned: bool = False,
        stft_cfg: StftConfig = DEFAULT_STFT,
        seed: Optional[int] = None,
    ) -> "ModelBundle":
        if seed is not None:
            torch.manual_seed(seed)
        res = StageModel("res", res_cfg, stft_cfg)
        twin = None
        if with_finetuned:
            twin = StageModel("res", res_cfg, stft_cfg)
            twin.load_state_dict(res.state_dict())
        return cls(StageModel("fill", fill_cfg, stft_cfg), StageModel("sep", sep_cfg, stft_cfg), res, twin)

    def stages(self) -> Dict[str, StageModel]:
        out = {"fill": self.fill, "sep": self.sep, "res": self.res}
        if self.res_finetuned is not None:
            out["res_finetuned"] = self.res_finetuned
        return out

    def param_counts(self) -> Dict[str, int]:
        return {k: sum(p.numel() for p in m.parameters()) for k, m in self.stages().items()}

    def save(self, directory) -> None:
        directory = Path(directory)
        for name, model in self.stages().items():
            save_checkpoint(directory / STAGE_FILES[name], model)

    @classmethod
    def load(cls, directory, require_finetuned: bool = False) -> "ModelBundle":
        directory = Path(directory)
        models = {}
        for name, fname in STAGE_FILES.items():
            path = directory / fname
            if path.exists():
                models[name] = load_checkpoint(path)[0]
            elif name != "res_finetuned" or require_finetuned:
                raise ConfigurationError(f"missing checkpoint {path}")
        return cls(models["fill"], models["sep"], models["res"], models.get("res_finetuned"))


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(path, model: StageModel, extra: Optional[dict] = None) -> None:
    """Archive holding the format tag, the stage kind, both configs and the weights."""
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "gridnet": model.cfg.to_dict(),
        "stft": asdict(model.stft_cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    _atomic_save(payload, Path(path))


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: not a version-{FORMAT_VERSION} stage checkpoint")
    model = StageModel(payload["kind"], GridNetConfig(**payload["gridnet"]), StftConfig(**payload["stft"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
