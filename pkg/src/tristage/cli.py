"""``tristage`` command line: simulate | train | finetune | enhance | evaluate | audit.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 for runtime
failures (unreadable audio, missing artifacts, non-finite losses).
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
import numpy as np

from .audio_io import ManifestEntry, read_manifest, read_wav, write_manifest, write_wav
from .config import ExperimentConfig, load_config, resolve_device
from .degrade import DistortionRecipe, full_chain_recipe, simulate_pair
from .errors import ConfigurationError, TristageError

log = logging.getLogger("tristage")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class RuntimeFailure(Exception):
    """Raised by a command whose work partly or wholly failed."""


def _run(fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except ConfigurationError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (RuntimeFailure, TristageError, OSError, ValueError, RuntimeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    sys.exit(EXIT_OK)


def _config_options(f):
    f = click.option("--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE", help="Override a config leaf.")(f)
    f = click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Experiment YAML.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int):
    """Three-stage speech enhancement toolkit."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# simulate ------------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out_dir, manifest: Optional[str] = None) -> dict:
    """Materialise (input, target) pairs with one provenance sidecar per pair.

    Each utterance draws from its own generator seeded by ``(seed, index)``,
    so a failing file never shifts the draws of the others.
    """
    manifest = manifest or cfg.paths.manifest
    if manifest is None:
        raise ConfigurationError("simulate needs paths.manifest or --manifest")
    entries = read_manifest(manifest)
    stage = cfg.simulate.stage
    recipe = cfg.recipe(stage)
    out = Path(out_dir)
    errors = {}
    inputs: List[ManifestEntry] = []
    targets: List[ManifestEntry] = []
    for i, e in enumerate(entries):
        try:
            clean = read_wav(e.path)
            rng = np.random.default_rng([cfg.seed, i])
            pair = simulate_pair(clean, recipe, rng)
        except (OSError, ValueError, TristageError) as exc:
            errors[e.utt_id] = str(exc)
            log.error("%s: %s", e.path, exc)
            continue
        in_path = out / "inputs" / f"{e.utt_id}.wav"
        tgt_path = out / "targets" / f"{e.utt_id}.wav"
        write_wav(in_path, pair.input)
        write_wav(tgt_path, pair.target)
        sidecar = {"utt_id": e.utt_id, "clean": e.path, "stage": stage, "seed": [cfg.seed, i], **pair.provenance()}
        (out / "provenance").mkdir(parents=True, exist_ok=True)
        (out / "provenance" / f"{e.utt_id}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
        tags = dict(e.tags)
        tags["distortions"] = [d.kind for d in pair.draws]
        inputs.append(ManifestEntry(e.utt_id, str(in_path.resolve()), pair.input.fs, tags))
        targets.append(ManifestEntry(e.utt_id, str(tgt_path.resolve()), pair.target.fs, tags))
    if entries:
        write_manifest(out / "inputs.jsonl", inputs)
        write_manifest(out / "targets.jsonl", targets)
    if errors:
        out.mkdir(parents=True, exist_ok=True)
        (out / "errors.json").write_text(json.dumps(errors, indent=1, sort_keys=True) + "\n")
    return errors


@main.command()
@_config_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Defaults to paths.simulated_dir.")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None, help="Clean manifest; overrides paths.manifest.")
def simulate(config_path, overrides, out_dir, manifest):
    """Simulate distorted/target pairs from a clean manifest."""

    def go():
        cfg = load_config(config_path, overrides)
        errors = cmd_simulate(cfg, out_dir or cfg.paths.simulated_dir, manifest)
        if errors:
            raise RuntimeFailure(f"{len(errors)} file(s) failed: " + ", ".join(sorted(errors)))

    _run(go)


# train / finetune ------------------------------------------------------------------------


def _read_cleans(cfg: ExperimentConfig):
    if cfg.paths.manifest is None:
        raise ConfigurationError("training needs paths.manifest (clean speech)")
    return [read_wav(e.path) for e in read_manifest(cfg.paths.manifest)]


def _train_config(cfg: ExperimentConfig, phase: str):
    from .trainer import TrainConfig, TrainPhase

    tphase = TrainPhase(phase, "previous_stage_output" if phase in ("saft", "jft") else "simulated")
    terms = cfg.train.maft if phase in ("maft", "jft") else ()
    return TrainConfig(
        stage=cfg.train.stage,
        schedule=cfg.schedule(),
        phase=tphase,
        enabled_terms=terms,
        weights=cfg.weights(),
        disc_width=cfg.train.disc_width,
        checkpoint_every=cfg.train.checkpoint_every,
        seed=cfg.seed,
    )


def cmd_train(cfg: ExperimentConfig) -> Path:
    from .trainer import SimulatedSource, build_stage_model, export_model_checkpoint, train_stage

    if cfg.train.phase != "base":
        raise ConfigurationError(f"train runs the base phase; use finetune for {cfg.train.phase!r}")
    stage = cfg.train.stage
    tcfg = _train_config(cfg, "base")
    source = SimulatedSource(_read_cleans(cfg), cfg.recipe(stage), tcfg.schedule.batch_per_device, tcfg.schedule.utt_len_s)
    val = source.pairs(np.random.default_rng([cfg.seed, 1]), cfg.train.val_utterances) if cfg.train.val_utterances else ()
    model = build_stage_model(stage, cfg.gridnet(stage), cfg.seed).to(resolve_device())
    result = train_stage(
        tcfg,
        model,
        source,
        Path(cfg.paths.train_dir) / stage,
        rng=np.random.default_rng(cfg.seed),
        val_pairs=val,
        resume_from=cfg.train.resume,
    )
    dest = Path(cfg.paths.checkpoint_dir) / (cfg.train.export_as or f"{stage}.pt")
    export_model_checkpoint(result.last_checkpoint, dest)
    return dest


def cmd_finetune(cfg: ExperimentConfig) -> Path:
    from .nets.bundle import STAGE_FILES, load_checkpoint
    from .trainer import SimulatedSource, export_model_checkpoint, finetune

    phase, stage = cfg.train.phase, cfg.train.stage
    if phase == "base":
        raise ConfigurationError("finetune needs train.phase maft, saft or jft")
    ckpt_dir = Path(cfg.paths.checkpoint_dir)
    device = resolve_device()
    model, _ = load_checkpoint(ckpt_dir / STAGE_FILES[stage])
    model.to(device)
    prev_fill = prev_sep = None
    recipe: DistortionRecipe = cfg.recipe(stage)
    if phase in ("saft", "jft"):
        if stage == "fill":
            raise ConfigurationError("the fill stage has no previous stage to fine-tune on")
        prev_fill = load_checkpoint(ckpt_dir / STAGE_FILES["fill"])[0].to(device)
        if stage == "res":
            prev_sep = load_checkpoint(ckpt_dir / STAGE_FILES["sep"])[0].to(device)
            if cfg.simulate.recipe is None or cfg.simulate.stage != "res":
                recipe = full_chain_recipe()
    tcfg = _train_config(cfg, phase)
    source = SimulatedSource(_read_cleans(cfg), recipe, tcfg.schedule.batch_per_device, tcfg.schedule.utt_len_s)
    val = source.pairs(np.random.default_rng([cfg.seed, 1]), cfg.train.val_utterances) if cfg.train.val_utterances else ()
    result = finetune(
        tcfg.phase,
        tcfg,
        model,
        source,
        Path(cfg.paths.train_dir) / f"{stage}_{phase}",
        prev_fill=prev_fill,
        prev_sep=prev_sep,
        rng=np.random.default_rng(cfg.seed),
        val_pairs=val,
    )
    dest = ckpt_dir / (cfg.train.export_as or f"{stage}_{phase}.pt")
    export_model_checkpoint(result.last_checkpoint, dest)
    return dest


@main.command()
@_config_options
def train(config_path, overrides):
    """Base-train one stage (train.stage) on simulated data."""

    def go():
        dest = cmd_train(load_config(config_path, overrides))
        click.echo(f"exported {dest}")

    _run(go)


@main.command(name="finetune")
@_config_options
def finetune_cmd(config_path, overrides):
    """Metric-aware, stage-aware or joint fine-tuning of a trained stage."""

    def go():
        dest = cmd_finetune(load_config(config_path, overrides))
        click.echo(f"exported {dest}")

    _run(go)


# enhance -----------------------------------------------------------------------------------


def _collect_wavs(paths) -> List[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.wav")))
        else:
            out.append(p)
    return out


def cmd_enhance(cfg: ExperimentConfig, inputs, out_dir) -> dict:
    from .nets.bundle import ModelBundle
    from .pipeline import enhance_files

    bundle = ModelBundle.load(cfg.paths.checkpoint_dir, require_finetuned=cfg.enhance.bwai).to(resolve_device())
    info = enhance_files(
        _collect_wavs(inputs),
        Path(out_dir),
        bundle,
        bwai_enabled=cfg.enhance.bwai,
        stage_mask=cfg.enhance.stages,
        workers=cfg.enhance.workers,
        normalize_level=cfg.enhance.normalize_level,
    )
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "routing.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return info


@main.command()
@_config_options
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def enhance(config_path, overrides, inputs, out_dir):
    """Enhance WAV files (or directories of them) with the trained bundle."""

    def go():
        info = cmd_enhance(load_config(config_path, overrides), inputs, out_dir)
        failed = sorted(k for k, v in info.items() if "error" in v)
        if failed:
            raise RuntimeFailure(f"{len(failed)} file(s) failed: " + ", ".join(failed))

    _run(go)


# evaluate ----------------------------------------------------------------------------------


def cmd_evaluate(cfg: ExperimentConfig, ref_manifest, est_dir, out_dir):
    from .evalkit import ExternalScorer, eval_corpus

    adapters = {k: ExternalScorer.from_string(k, v) for k, v in cfg.evaluate.adapters.items()}
    report = eval_corpus(ref_manifest, est_dir, cfg.evaluate.metrics, adapters, workers=cfg.evaluate.workers)
    report.write(out_dir)
    return report


@main.command()
@_config_options
@click.option("--ref", "ref_manifest", required=True, type=click.Path(exists=True, dir_okay=False), help="Reference manifest.")
@click.option("--est", "est_dir", required=True, type=click.Path(file_okay=False), help="Directory of system outputs.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def evaluate(config_path, overrides, ref_manifest, est_dir, out_dir):
    """Score system outputs against references; writes report.jsonl and report.txt."""

    def go():
        report = cmd_evaluate(load_config(config_path, overrides), ref_manifest, est_dir, out_dir)
        click.echo(report.to_table(), nl=False)
        if report.errors:
            raise RuntimeFailure(f"{len(report.errors)} utterance(s) failed to score")

    _run(go)


# audit -------------------------------------------------------------------------------------


def cmd_audit(cfg: ExperimentConfig):
    from .nets.audit import audit as run_audit

    return run_audit(cfg.gridnet("fill"), cfg.gridnet("sep"), cfg.gridnet("res"))


@main.command()
@_config_options
@click.option("--json", "as_json", is_flag=True, help="Print the report as JSON.")
def audit(config_path, overrides, as_json):
    """Parameter counts and MACs per second of the configured bundle."""

    def go():
        report = cmd_audit(load_config(config_path, overrides))
        click.echo(json.dumps(report.to_dict(), indent=1, sort_keys=True) if as_json else report.to_text())

    _run(go)


if __name__ == "__main__":
    main()
