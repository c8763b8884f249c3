"""Objective evaluation: intrusive formula metrics, external scorer hooks and corpus reports.

SDR, LSD and MCD are computed here from the loss-module kernels. Every other
column of the report (DNSMOS, PESQ, ...) comes from an :class:`ExternalScorer`
that shells out to a user-supplied command; a column without an adapter is
printed as ``n/a``.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .audio_io import ManifestEntry, read_manifest, read_wav
from .dsp import DEFAULT_STFT, StftConfig, Waveform
from .errors import InvalidArgumentError, ShapeMismatchError, TristageError
from .losses.metric import MfccConfig, mfcc
from .losses.spectral import lsd_loss, sdr_loss, spectrogram

log = logging.getLogger(__name__)

# column order of the results tables; lower is better for mcd and lsd
REPORT_COLUMNS = (
    "dnsmos",
    "nisqa",
    "utmos",
    "pesq",
    "estoi",
    "sdr",
    "mcd",
    "lsd",
    "speechbertscore",
    "phnsim",
    "spksim",
    "cacc",
)
COLUMN_TITLES = {
    "dnsmos": "DNSMOS",
    "nisqa": "NISQA",
    "utmos": "UTMOS",
    "pesq": "PESQ",
    "estoi": "ESTOI",
    "sdr": "SDR(dB)",
    "mcd": "MCD",
    "lsd": "LSD",
    "speechbertscore": "SpeechBERTScore",
    "phnsim": "PhnSim",
    "spksim": "SpkSim",
    "cacc": "CAcc(%)",
}
INTRUSIVE = ("sdr", "mcd", "lsd")
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)


@dataclass(frozen=True)
class EvalSettings:
    """Analysis settings for the formula metrics; copied into every report header."""

    stft: StftConfig = DEFAULT_STFT
    mfcc: MfccConfig = MfccConfig()
    mcd_skip_c0: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mfcc"].pop("stft", None)
        return d


def _arrays(ref, est):
    a = ref.samples if isinstance(ref, Waveform) else np.asarray(ref, dtype=np.float64)
    b = est.samples if isinstance(est, Waveform) else np.asarray(est, dtype=np.float64)
    if isinstance(ref, Waveform) and isinstance(est, Waveform) and ref.fs != est.fs:
        raise ShapeMismatchError(f"sampling rates differ: {ref.fs} vs {est.fs}")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"length mismatch: {a.shape} vs {b.shape}")
    return torch.from_numpy(a), torch.from_numpy(b)


def _fs(ref, fs: Optional[int]) -> int:
    if isinstance(ref, Waveform):
        return ref.fs
    if fs is None:
        raise InvalidArgumentError("sampling rate required for array inputs")
    return fs


def eval_sdr(ref, est) -> float:
    """SDR in dB; the negated SDR loss times ten."""
    a, b = _arrays(ref, est)
    return -10.0 * float(sdr_loss(a, b))


def eval_lsd(ref, est, fs: Optional[int] = None, settings: EvalSettings = EvalSettings()) -> float:
    fs = _fs(ref, fs)
    a, b = _arrays(ref, est)
    return float(lsd_loss(spectrogram(a, fs, settings.stft), spectrogram(b, fs, settings.stft)))


def eval_mcd(ref, est, fs: Optional[int] = None, settings: EvalSettings = EvalSettings()) -> float:
    """Frame-averaged mel cepstral distortion in dB.

    ``10/ln(10) * sqrt(2 * sum_d (c_d - c_hat_d)^2)`` per frame. The
    cepstra are those of the MCD-aware loss halved, since that kernel takes
    the log of mel power and MCD is defined on log amplitude; c0 is dropped
    by default.
    """
    fs = _fs(ref, fs)
    a, b = _arrays(ref, est)
    diff = 0.5 * (mfcc(a, fs, settings.mfcc) - mfcc(b, fs, settings.mfcc))
    if settings.mcd_skip_c0:
        diff = diff[..., 1:]
    return MCD_SCALE * float(torch.sqrt((diff**2).sum(-1)).mean())


FORMULA_METRICS: Dict[str, Callable] = {
    "sdr": lambda ref, est, settings: eval_sdr(ref, est),
    "lsd": lambda ref, est, settings: eval_lsd(ref, est, settings=settings),
    "mcd": lambda ref, est, settings: eval_mcd(ref, est, settings=settings),
}


# External scorers ------------------------------------------------------------------------


@dataclass(frozen=True)
class ExternalScorer:
    """Runs ``command`` with ``{ref}``/``{est}`` placeholders and parses the last number printed.

    Reference-free scorers simply omit ``{ref}``.
    """

    name: str
    command: Sequence[str]
    timeout_s: float = 600.0

    def __call__(self, ref_path: str, est_path: str) -> float:
        args = [a.replace("{ref}", ref_path).replace("{est}", est_path) for a in self.command]
        try:
            proc = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout_s, check=True)
        except (OSError, subprocess.SubprocessError) as exc:
            raise TristageError(f"scorer {self.name!r} failed: {exc}") from exc
        tokens = proc.stdout.split()
        for tok in reversed(tokens):
            try:
                return float(tok)
            except ValueError:
                continue
        raise TristageError(f"scorer {self.name!r} printed no number: {proc.stdout!r}")

    @classmethod
    def from_string(cls, name: str, command: str) -> "ExternalScorer":
        return cls(name, tuple(shlex.split(command)))


# Corpus evaluation ---------------------------------------------------------------------------


@dataclass
class EvalRecord:
    utt_id: str
    metrics: Dict[str, float]
    tags: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise InvalidArgumentError(f"{self.utt_id}: non-finite values for {bad}")

    def to_json(self) -> str:
        return json.dumps({"utt_id": self.utt_id, "metrics": self.metrics, "tags": self.tags}, sort_keys=True)


@dataclass
class EvalReport:
    metrics: List[str]
    records: List[EvalRecord]
    aggregates: Dict[str, Dict[str, Dict[str, float]]]
    missing: List[str]
    errors: Dict[str, str]
    settings: dict

    def header(self) -> dict:
        return {
            "metrics": self.metrics,
            "settings": self.settings,
            "n_records": len(self.records),
            "missing": self.missing,
            "errors": self.errors,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps({"header": self.header()}, sort_keys=True)]
        lines += [r.to_json() for r in self.records]
        lines += [json.dumps({"aggregates": self.aggregates}, sort_keys=True)]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Aligned columns in results-table order; one row per aggregate group (means)."""
        cols = [c for c in REPORT_COLUMNS]
        titles = ["group"] + [COLUMN_TITLES[c] for c in cols]
        rows = []
        for group in sorted(self.aggregates, key=lambda g: (g != "all", g)):
            means = self.aggregates[group]
            rows.append([group] + [f"{means[c]['mean']:.3f}" if c in means else "n/a" for c in cols])
        widths = [max(len(t), *(len(r[i]) for r in rows)) if rows else len(t) for i, t in enumerate(titles)]
        lines = ["# settings: " + json.dumps(self.settings, sort_keys=True)]
        lines.append("  ".join(t.ljust(w) for t, w in zip(titles, widths)).rstrip())
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        if self.missing:
            lines.append("# missing outputs: " + ", ".join(self.missing))
        if self.errors:
            lines.append("# errors: " + ", ".join(f"{k}: {v}" for k, v in sorted(self.errors.items())))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.jsonl").write_text(self.to_jsonl())
        (out_dir / "report.txt").write_text(self.to_table())


def _tag_values(entry: ManifestEntry) -> Dict[str, str]:
    tags = {"fs": str(entry.fs)}
    for k, v in sorted(entry.tags.items()):
        tags[k] = "+".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v)
    return tags


def aggregate(records: Sequence[EvalRecord], metrics: Sequence[str]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Mean and median per metric, over all records and per ``tag=value`` group."""
    groups: Dict[str, List[EvalRecord]] = {"all": list(records)} if records else {}
    for r in records:
        for k, v in r.tags.items():
            groups.setdefault(f"{k}={v}", []).append(r)
    out = {}
    for name, recs in groups.items():
        out[name] = {}
        for m in metrics:
            vals = [r.metrics[m] for r in recs if m in r.metrics]
            if vals:
                out[name][m] = {"mean": float(np.mean(vals)), "median": float(np.median(vals)), "n": len(vals)}
    return out


def _output_path(entry: ManifestEntry, out_dir: Path) -> Optional[Path]:
    for cand in (out_dir / f"{entry.utt_id}.wav", out_dir / Path(entry.path).name):
        if cand.exists():
            return cand
    return None


def eval_corpus(
    manifest,
    output_dir,
    metrics: Iterable[str] = INTRUSIVE,
    adapters: Optional[Mapping[str, ExternalScorer]] = None,
    settings: EvalSettings = EvalSettings(),
    workers: int = 1,
) -> EvalReport:
    """Score system outputs against the manifest's references.

    ``manifest`` is a path to a JSON-lines manifest or a list of entries. An
    output is looked up as ``<output_dir>/<utt_id>.wav`` and then under the
    reference's file name.
    """
    entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    adapters = dict(adapters or {})
    metrics = [m for m in REPORT_COLUMNS if m in set(metrics)]
    for m in metrics:
        if m not in FORMULA_METRICS and m not in adapters:
            log.warning("no adapter for %s; it will be reported as n/a", m)
    active = [m for m in metrics if m in FORMULA_METRICS or m in adapters]
    out_dir = Path(output_dir)

    def one(entry: ManifestEntry):
        est_path = _output_path(entry, out_dir)
        if est_path is None:
            return entry.utt_id, None, "missing"
        try:
            ref, est = read_wav(entry.path), read_wav(est_path)
            vals = {}
            for m in active:
                if m in FORMULA_METRICS:
                    vals[m] = FORMULA_METRICS[m](ref, est, settings)
                else:
                    vals[m] = adapters[m](str(entry.path), str(est_path))
            return entry.utt_id, EvalRecord(entry.utt_id, vals, _tag_values(entry)), None
        except (OSError, ValueError, TristageError) as exc:
            return entry.utt_id, None, str(exc)

    if workers <= 1:
        results = [one(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, entries))

    records, missing, errors = [], [], {}
    for utt, rec, err in results:
        if err == "missing":
            missing.append(utt)
        elif err is not None:
            errors[utt] = err
        else:
            records.append(rec)
    report_settings = settings.to_dict()
    report_settings["adapters"] = {k: list(v.command) for k, v in sorted(adapters.items())}
    return EvalReport(metrics, records, aggregate(records, active), missing, errors, report_settings)
