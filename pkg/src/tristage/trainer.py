"""Stage-wise training: regression, GAN, metric-aware, stage-aware and joint fine-tuning.

A run is fully described by a :class:`TrainConfig`, a model, a batch source
and a numpy ``Generator``. Checkpoints carry every piece of mutable state
(weights, optimizers, both RNGs), so a resumed run retraces the metrics log
of an uninterrupted one exactly.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .degrade import DistortionRecipe, SimulatedPair, conform_rate, simulate_pair
from .dsp import FULLBAND_RATE, Waveform
from .errors import ConfigurationError, InvalidArgumentError, NonFiniteLossError
from .losses.composite import l2_metric_aware, l3_jft, resolve_terms, stage_gan_loss
from .losses.adversarial import gan_losses
from .losses.spectral import LossReport, LossWeights, l1_composite, sdr_loss
from .nets.bundle import FORMAT_VERSION
from .nets.discriminators import MRD_RESOLUTIONS, DiscriminatorSet, build_discriminators
from .nets.gridnet import GridNetConfig, StageModel
from .pipeline import run_fill, run_sep

log = logging.getLogger(__name__)

STAGE_RATES = {"fill": 16000, "sep": 16000, "res": FULLBAND_RATE}
PHASES = ("base", "maft", "saft", "jft")
DATA_SOURCES = ("simulated", "previous_stage_output")


# Schedules -------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    batch_per_device: int
    utt_len_s: float
    total_steps: int
    warmup_steps: int
    min_lr: float
    max_lr: float

    def __post_init__(self):
        if self.batch_per_device <= 0 or self.utt_len_s <= 0:
            raise InvalidArgumentError("batch size and utterance length must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidArgumentError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not 0 < self.min_lr <= self.max_lr:
            raise InvalidArgumentError(f"need 0 < min_lr <= max_lr, got {self.min_lr}, {self.max_lr}")

    def scaled(self, divisor: float) -> "TrainSchedule":
        """Same shape with step counts divided by ``divisor`` (desk-scale runs)."""
        if divisor < 1:
            raise InvalidArgumentError("scale divisor must be >= 1")
        total = max(int(self.total_steps // divisor), 2)
        warm = min(int(self.warmup_steps // divisor), total - 1)
        return replace(self, total_steps=total, warmup_steps=warm)


SCHEDULES: Dict[str, TrainSchedule] = {
    "fill": TrainSchedule(6, 2.0, 50000, 5000, 1e-6, 1e-3),
    "sep": TrainSchedule(1, 4.0, 200000, 20000, 1e-6, 1e-3),
    "maft": TrainSchedule(1, 4.0, 5000, 1500, 1e-6, 1e-4),
    "res": TrainSchedule(6, 2.0, 100000, 10000, 1e-6, 5e-4),
    "saft_jft": TrainSchedule(6, 2.0, 25000, 2500, 1e-6, 1e-4),
}


def lr_at(step: int, sched: TrainSchedule) -> float:
    """Linear warm-up from min_lr to max_lr, then cosine annealing back to min_lr."""
    if not 0 <= step <= sched.total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {sched.total_steps}]")
    lo, hi = sched.min_lr, sched.max_lr
    if step <= sched.warmup_steps:
        frac = step / sched.warmup_steps if sched.warmup_steps else 1.0
    else:
        progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
        frac = 0.5 * (1.0 + math.cos(math.pi * progress))
    # convex combination so both endpoints are hit exactly
    return lo * (1.0 - frac) + hi * frac


@dataclass(frozen=True)
class TrainPhase:
    phase: str = "base"
    data_source: str = "simulated"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InvalidArgumentError(f"unknown phase {self.phase!r}")
        if self.data_source not in DATA_SOURCES:
            raise InvalidArgumentError(f"unknown data source {self.data_source!r}")
        if self.phase in ("saft", "jft") and self.data_source != "previous_stage_output":
            raise InvalidArgumentError(f"{self.phase} trains on previous-stage outputs")


# Batch sources ----------------------------------------------------------------------------


@dataclass
class Batch:
    inputs: torch.Tensor  # (B, N)
    targets: torch.Tensor
    fs: int


def _crop(wav: Waveform, n: int, rng: np.random.Generator) -> Waveform:
    if len(wav) <= n:
        return wav.with_samples(np.pad(wav.samples, (0, n - len(wav))))
    start = int(rng.integers(0, len(wav) - n + 1))
    return wav.with_samples(wav.samples[start : start + n])


def _stack(pairs: Sequence[SimulatedPair], dtype=torch.float32) -> Batch:
    x = torch.from_numpy(np.stack([p.input.samples for p in pairs])).to(dtype)
    y = torch.from_numpy(np.stack([p.target.samples for p in pairs])).to(dtype)
    return Batch(x, y, pairs[0].input.fs)


class SimulatedSource:
    """Random crops of a clean corpus degraded on the fly by a stage recipe."""

    def __init__(self, cleans: Sequence[Waveform], recipe: DistortionRecipe, batch_size: int, seg_len_s: float):
        self.recipe = recipe
        self.batch_size = batch_size
        self.cleans = []
        for w in cleans:
            if recipe.stage == "res" and w.fs != FULLBAND_RATE:
                log.warning("skipping %d Hz utterance: restoration trains on 48 kHz audio", w.fs)
                continue
            if recipe.stage != "res" and w.fs < STAGE_RATES[recipe.stage]:
                log.warning("skipping %d Hz utterance: below the %d Hz training rate", w.fs, STAGE_RATES[recipe.stage])
                continue
            self.cleans.append(conform_rate(w, recipe.stage))
        if not self.cleans:
            raise ConfigurationError("no usable clean utterances for this stage")
        self.fs = self.cleans[0].fs
        self.seg_len = int(round(seg_len_s * self.fs))

    def pairs(self, rng: np.random.Generator, n: int) -> List[SimulatedPair]:
        out = []
        for _ in range(n):
            for _attempt in range(20):
                clean = _crop(self.cleans[int(rng.integers(len(self.cleans)))], self.seg_len, rng)
                if np.max(np.abs(clean.samples)) > 0:
                    break
            else:
                raise ConfigurationError("clean corpus keeps yielding silent segments")
            out.append(simulate_pair(clean, self.recipe, rng))
        return out

    def next_batch(self, rng: np.random.Generator) -> Batch:
        return _stack(self.pairs(rng, self.batch_size))


class FixedPairSource:
    """A fixed set of pre-simulated pairs; each batch draws distinct pairs at random."""

    def __init__(self, pairs: Sequence[SimulatedPair], batch_size: int):
        if not pairs:
            raise ConfigurationError("empty pair set")
        self.pairs = list(pairs)
        self.batch_size = min(batch_size, len(self.pairs))
        self.fs = self.pairs[0].input.fs

    def next_batch(self, rng: np.random.Generator) -> Batch:
        idx = rng.choice(len(self.pairs), size=self.batch_size, replace=False)
        return _stack([self.pairs[int(i)] for i in idx])


class PreviousStageSource:
    """Feeds a base source's inputs through frozen earlier stages (fill, then sep)."""

    def __init__(self, base, fill: Optional[StageModel] = None, sep: Optional[StageModel] = None):
        if fill is None and sep is None:
            raise ConfigurationError("previous-stage data needs at least one frozen network")
        self.base, self.fill, self.sep = base, fill, sep
        for m in (fill, sep):
            if m is not None:
                m.eval().requires_grad_(False)
        self.fs = base.fs

    def transform(self, x: Waveform) -> Waveform:
        holder = _FrozenStages(self.fill, self.sep)
        if self.fill is not None:
            x = run_fill(x, holder)
        if self.sep is not None:
            x = run_sep(x, holder)
        return x

    def next_batch(self, rng: np.random.Generator) -> Batch:
        batch = self.base.next_batch(rng)
        xs = [self.transform(Waveform(row.double().numpy(), batch.fs)).samples for row in batch.inputs]
        return Batch(torch.from_numpy(np.stack(xs)).to(batch.inputs.dtype), batch.targets, batch.fs)


@dataclass
class _FrozenStages:
    fill: Optional[StageModel]
    sep: Optional[StageModel]


# Configuration -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str
    schedule: TrainSchedule
    phase: TrainPhase = field(default_factory=TrainPhase)
    enabled_terms: Tuple[str, ...] = ()
    weights: LossWeights = field(default_factory=LossWeights)
    disc_width: float = 1.0
    mrd_resolutions: Tuple[Tuple[int, int], ...] = MRD_RESOLUTIONS
    betas: Tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 1e-2
    grad_clip: float = 5.0
    checkpoint_every: int = 0
    validate_every: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_RATES:
            raise InvalidArgumentError(f"unknown stage {self.stage!r}")
        self.enabled_terms = resolve_terms(self.enabled_terms)
        if self.phase.phase == "jft" and self.stage == "sep":
            raise InvalidArgumentError("joint fine-tuning needs a stage with discriminators (fill or res)")

    @property
    def adversarial(self) -> bool:
        if self.phase.phase == "maft":
            return False
        if self.phase.phase == "jft":
            return True
        return self.stage in ("fill", "res")

    @property
    def val_interval(self) -> int:
        if self.validate_every is not None:
            return self.validate_every
        return max(self.schedule.total_steps // 20, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enabled_terms"] = list(self.enabled_terms)
        return d


@dataclass
class TrainResult:
    model: StageModel
    discriminators: Optional[DiscriminatorSet]
    records: List[dict]
    last_checkpoint: Optional[Path]


# Loss evaluation -------------------------------------------------------------------------------


def _generator_loss(cfg: TrainConfig, target, output, fs, disc: Optional[DiscriminatorSet]) -> LossReport:
    phase = cfg.phase.phase
    if phase == "jft":
        with _frozen(disc):
            real = _detach_out(disc(target))
            fake = disc(output)
        return l3_jft(target, output, (real, fake), cfg.weights, cfg.enabled_terms, fs=fs)
    if phase == "maft":
        return l2_metric_aware(target, output, cfg.enabled_terms, cfg.weights, fs=fs)
    if cfg.adversarial:
        with _frozen(disc):
            real = _detach_out(disc(target))
            fake = disc(output)
        report, _ = stage_gan_loss(target, output, real, fake, fs, cfg.weights)
        return report
    return l1_composite(target, output, cfg.weights, fs=fs)


def _detach_out(out):
    out.scores = [s.detach() for s in out.scores]
    out.features = [[f.detach() for f in fs] for fs in out.features]
    return out


class _frozen:
    """Temporarily stop gradient accumulation into a module's parameters."""

    def __init__(self, module: Optional[nn.Module]):
        self.module = module
        self.saved = []

    def __enter__(self):
        if self.module is not None:
            self.saved = [p.requires_grad for p in self.module.parameters()]
            self.module.requires_grad_(False)
        return self.module

    def __exit__(self, *exc):
        if self.module is not None:
            for p, flag in zip(self.module.parameters(), self.saved):
                p.requires_grad_(flag)


def discriminator_step_loss(disc: DiscriminatorSet, target: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
    """LSGAN discriminator objective; the generator output is detached."""
    real = disc(target)
    fake = disc(output.detach())
    _, adv_d, _ = gan_losses(real, fake)
    return adv_d


def _record_values(report: LossReport, prefix: str = "") -> Dict[str, float]:
    out = {f"{prefix}{k}": v for k, v in report.values().items()}
    parts = getattr(report, "parts", None)
    if parts is not None:
        out.update({f"{prefix}l2.{k}": v for k, v in parts.values().items()})
    return out


# Checkpoints ----------------------------------------------------------------------------------


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_train_state(path, step, cfg, model, disc, opt_g, opt_d, rng: np.random.Generator) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "type": "train_state",
        "step": step,
        "train_config": cfg.to_dict(),
        "kind": model.kind,
        "gridnet": model.cfg.to_dict(),
        "stft": asdict(model.stft_cfg),
        "state_dict": model.state_dict(),
        "disc_state": disc.state_dict() if disc is not None else None,
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict() if opt_d is not None else None,
        "numpy_rng": rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "extra": {"stage": cfg.stage, "phase": cfg.phase.phase, "step": step},
    }
    _atomic_save(payload, Path(path))


def load_train_state(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION or payload.get("type") != "train_state":
        raise ConfigurationError(f"{path} is not a training checkpoint")
    return payload


def export_model_checkpoint(train_state_path, out_path) -> None:
    """Strip optimizer and rng state, leaving a stage checkpoint loadable by the bundle."""
    payload = load_train_state(train_state_path)
    keep = {k: payload[k] for k in ("format_version", "kind", "gridnet", "stft", "state_dict", "extra")}
    _atomic_save(keep, Path(out_path))


# Loop -----------------------------------------------------------------------------------------


def _validate(model: StageModel, val_pairs: Sequence[SimulatedPair], cfg: TrainConfig) -> Dict[str, float]:
    model.eval()
    device = next(model.parameters()).device
    sdr_in, sdr_out, losses = [], [], []
    with torch.no_grad():
        for p in val_pairs:
            x = torch.from_numpy(p.input.samples).float()[None]
            y = torch.from_numpy(p.target.samples).float()[None]
            out = model(x.to(device), p.input.fs).cpu()
            sdr_in.append(-10.0 * float(sdr_loss(y.double(), x.double())))
            sdr_out.append(-10.0 * float(sdr_loss(y.double(), out.double())))
            losses.append(float(l1_composite(y.double(), out.double(), cfg.weights, fs=p.input.fs).total))
    model.train()
    return {"val_sdr_in": float(np.mean(sdr_in)), "val_sdr_out": float(np.mean(sdr_out)), "val_l1": float(np.mean(losses))}


def _truncate_log(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] <= last_step:
            keep.append(line)
    path.write_text("".join(l + "\n" for l in keep))


def train_stage(
    cfg: TrainConfig,
    model: StageModel,
    source,
    out_dir,
    rng: Optional[np.random.Generator] = None,
    val_pairs: Sequence[SimulatedPair] = (),
    resume_from=None,
    discriminators: Optional[DiscriminatorSet] = None,
    stop_at: Optional[int] = None,
) -> TrainResult:
    """Train one stage network.

    ``stop_at`` ends the loop early (after that many steps) without changing
    the schedule; together with ``resume_from`` it reproduces an interrupted
    run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if model.kind != cfg.stage:
        raise ConfigurationError(f"model is a {model.kind} network but the run trains {cfg.stage}")

    device = next(model.parameters()).device
    disc = discriminators
    if cfg.adversarial and disc is None:
        disc = build_discriminators("res" if cfg.stage == "res" else "fill", cfg.disc_width, cfg.mrd_resolutions)
    if not cfg.adversarial:
        disc = None
    if disc is not None:
        disc.to(device)

    sched = cfg.schedule
    opt_g = torch.optim.AdamW(model.parameters(), lr=sched.min_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    opt_d = (
        torch.optim.AdamW(disc.parameters(), lr=sched.min_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        if disc is not None
        else None
    )

    start = 0
    if resume_from is not None:
        state = load_train_state(resume_from)
        model.load_state_dict(state["state_dict"])
        if disc is not None:
            disc.load_state_dict(state["disc_state"])
            opt_d.load_state_dict(state["opt_d"])
        opt_g.load_state_dict(state["opt_g"])
        rng.bit_generator.state = state["numpy_rng"]
        torch.set_rng_state(state["torch_rng"])
        start = state["step"]
        _truncate_log(metrics_path, start - 1)
    elif metrics_path.exists():
        metrics_path.unlink()

    end = sched.total_steps if stop_at is None else min(stop_at, sched.total_steps)
    records: List[dict] = []
    model.train()
    if disc is not None:
        disc.train()

    with open(metrics_path, "a") as log_fh:
        for step in range(start, end):
            lr = lr_at(step, sched)
            for opt in (opt_g, opt_d):
                if opt is not None:
                    for g in opt.param_groups:
                        g["lr"] = lr
            batch = source.next_batch(rng)
            batch = Batch(batch.inputs.to(device), batch.targets.to(device), batch.fs)
            output = model(batch.inputs, batch.fs)
            record = {"step": step, "kind": "train", "lr": lr}

            if disc is not None:
                opt_d.zero_grad(set_to_none=True)
                loss_d = discriminator_step_loss(disc, batch.targets, output)
                _check_finite(loss_d, step, batch, out_dir, "discriminator")
                loss_d.backward()
                torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
                opt_d.step()
                record["disc"] = float(loss_d.detach())

            opt_g.zero_grad(set_to_none=True)
            report = _generator_loss(cfg, batch.targets, output, batch.fs, disc)
            _check_finite(report.total, step, batch, out_dir, "generator")
            report.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt_g.step()
            record.update(_record_values(report))

            if val_pairs and ((step + 1) % cfg.val_interval == 0 or step + 1 == sched.total_steps):
                record.update(_validate(model, val_pairs, cfg))
            records.append(record)
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_train_state(out_dir / f"ckpt_{done:08d}.pt", done, cfg, model, disc, opt_g, opt_d, rng)

    final = out_dir / "last.pt"
    save_train_state(final, end, cfg, model, disc, opt_g, opt_d, rng)
    return TrainResult(model, disc, records, final)


def _check_finite(loss: torch.Tensor, step: int, batch: Batch, out_dir: Path, which: str) -> None:
    if torch.isfinite(loss).all():
        return
    dump = out_dir / f"nonfinite_step{step:08d}.pt"
    _atomic_save({"step": step, "which": which, "inputs": batch.inputs, "targets": batch.targets, "fs": batch.fs}, dump)
    raise NonFiniteLossError(f"non-finite {which} loss at step {step}; batch dumped to {dump}", dump)


# Fine-tuning ----------------------------------------------------------------------------------


def finetune(
    phase: TrainPhase,
    cfg: TrainConfig,
    model: Optional[StageModel],
    source,
    out_dir,
    prev_fill: Optional[StageModel] = None,
    prev_sep: Optional[StageModel] = None,
    rng: Optional[np.random.Generator] = None,
    val_pairs: Sequence[SimulatedPair] = (),
    discriminators: Optional[DiscriminatorSet] = None,
) -> TrainResult:
    """Continue training a converged stage network.

    maft: metric-aware loss on simulated data. saft: the stage's base loss on
    outputs of frozen earlier stages. jft: the joint loss on those outputs,
    with discriminators active.
    """
    if model is None:
        raise ConfigurationError("fine-tuning needs a trained base network")
    if phase.phase == "base":
        raise InvalidArgumentError("use train_stage for base training")
    if phase.phase in ("saft", "jft"):
        if prev_fill is None and prev_sep is None:
            raise ConfigurationError(f"{phase.phase} needs the frozen previous-stage networks")
        source = PreviousStageSource(source, prev_fill, prev_sep)
    cfg = replace(cfg, phase=phase)
    return train_stage(cfg, model, source, out_dir, rng=rng, val_pairs=val_pairs, discriminators=discriminators)


def build_stage_model(stage: str, gcfg: GridNetConfig, seed: int) -> StageModel:
    torch.manual_seed(seed)
    return StageModel(stage, gcfg)
