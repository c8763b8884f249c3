"""Distortion simulators and per-stage (input, target) pair construction.

Random choices are made once, up front, into a list of :class:`Draw` records.
The input and the target are then both rendered from that list, the target
from the subset of kinds it keeps, so the two paths can never disagree on a
cutoff, an SNR or a noise realisation. The records are JSON-serialisable and
double as the provenance sidecar written by ``simulate``.
"""

from __future__ import annotations

import logging
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy import signal as sps

from . import audio_io
from .dsp import SUPPORTED_RATES, Waveform, resample, resample_array
from .errors import (
    CodecAdapterError,
    DegenerateInputError,
    InvalidArgumentError,
    UnsupportedRateError,
)

log = logging.getLogger(__name__)

KINDS = ("noise", "reverb", "clipping", "bandwidth_limit", "codec", "packet_loss", "wind")
# Order in which sampled distortions are rendered onto a signal.
APPLY_ORDER = ("reverb", "noise", "wind", "clipping", "bandwidth_limit", "codec", "packet_loss")
STAGES = ("fill", "sep", "res")
TRAIN_RATE = {"fill": 16000, "sep": 16000, "res": 48000}

DEFAULT_PARAMS: Dict[str, Dict[str, object]] = {
    "noise": {"snr_db": [-5.0, 20.0], "colors": ["white", "pink", "brown"]},
    "reverb": {"t60": [0.2, 1.0]},
    "clipping": {"clip_ratio": [0.1, 0.9]},
    # effective bandwidths (Hz); the simulator resamples through 2x this rate
    "bandwidth_limit": {"bandwidths": [4000, 8000, 16000, 22050, 24000]},
    "codec": {"presets": ["mulaw8", "mulaw6"]},
    "packet_loss": {"rate": [0.05, 0.3], "segment_ms": [20.0, 320.0]},
    "wind": {"snr_db": [-5.0, 15.0], "intensity": [0.2, 1.0]},
}


# --------------------------------------------------------------------------
# elementary simulators
# --------------------------------------------------------------------------


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x)) if x.size else 0.0


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[0] >= n:
        return x[:n]
    return np.resize(x, n)  # loops the signal


def apply_noise(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add ``noise`` scaled so that the speech-to-noise power ratio equals ``snr_db``."""
    if clean.fs != noise.fs:
        raise InvalidArgumentError(f"rate mismatch: clean {clean.fs} Hz vs noise {noise.fs} Hz")
    if not math.isfinite(snr_db):
        raise InvalidArgumentError("snr_db must be finite")
    p_speech = _power(clean.samples)
    if p_speech == 0.0:
        raise DegenerateInputError("clean signal is silent")
    n = _fit_length(noise.samples, len(clean))
    p_noise = _power(n)
    if p_noise == 0.0:
        raise DegenerateInputError("noise signal is silent")
    scale = math.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean.with_samples(clean.samples + scale * n)


def synth_noise(n: int, fs: int, rng: np.random.Generator, color: str = "white") -> np.ndarray:
    """Gaussian noise with a 1/f^alpha power spectrum (white, pink or brown)."""
    alpha = {"white": 0.0, "pink": 1.0, "brown": 2.0}.get(color)
    if alpha is None:
        raise InvalidArgumentError(f"unknown noise color {color!r}")
    x = rng.standard_normal(n)
    if alpha == 0.0:
        return x
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shape = np.ones_like(freqs)
    shape[1:] = (freqs[1:] / freqs[1]) ** (-alpha / 2)
    shape[0] = 0.0
    return np.fft.irfft(spec * shape, n)


def synth_rir(fs: int, t60: float, rng: np.random.Generator) -> np.ndarray:
    """Exponentially decaying Gaussian tail behind a unit direct path at lag 0."""
    if t60 <= 0:
        raise InvalidArgumentError("t60 must be positive")
    length = max(int(t60 * fs), 2)
    t = np.arange(length) / fs
    h = 0.3 * rng.standard_normal(length) * np.exp(-3.0 * math.log(10.0) * t / t60)
    h[0] = 1.0
    return h


def apply_reverb(clean: Waveform, rir: Waveform) -> Waveform:
    if clean.fs != rir.fs:
        raise InvalidArgumentError(f"rate mismatch: clean {clean.fs} Hz vs RIR {rir.fs} Hz")
    if len(rir) == 0 or not np.any(rir.samples):
        raise DegenerateInputError("RIR is empty or all zeros")
    x = clean.samples
    y = sps.fftconvolve(x, rir.samples)[: len(x)]
    peak_in, peak_out = np.max(np.abs(x), initial=0.0), np.max(np.abs(y), initial=0.0)
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return clean.with_samples(y)


def apply_clip(wav: Waveform, clip_ratio: float) -> Waveform:
    if not 0.0 < clip_ratio <= 1.0:
        raise InvalidArgumentError(f"clip_ratio must lie in (0, 1], got {clip_ratio}")
    peak = np.max(np.abs(wav.samples), initial=0.0)
    if peak == 0.0:
        raise DegenerateInputError("cannot clip a silent signal")
    theta = clip_ratio * peak
    return wav.with_samples(np.clip(wav.samples, -theta, theta))


def apply_bandwidth_limit(wav: Waveform, cutoff_fs: int) -> Waveform:
    """Resample down to ``cutoff_fs`` and back, removing content above cutoff_fs / 2."""
    if cutoff_fs >= wav.fs:
        raise InvalidArgumentError(f"cutoff rate {cutoff_fs} must be below the signal rate {wav.fs}")
    low = resample_array(wav.samples, wav.fs, cutoff_fs)
    back = resample_array(low, cutoff_fs, wav.fs)
    n = len(wav)
    return wav.with_samples(back[:n] if len(back) >= n else np.pad(back, (0, n - len(back))))


# --------------------------------------------------------------------------
# codecs
# --------------------------------------------------------------------------


def mulaw_encode(x: np.ndarray, bits: int) -> np.ndarray:
    mu = 2**bits - 1
    x = np.clip(x, -1.0, 1.0)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / math.log1p(mu)
    return np.round((y + 1.0) / 2.0 * mu).astype(np.int64)


def mulaw_decode(codes: np.ndarray, bits: int) -> np.ndarray:
    mu = 2**bits - 1
    y = 2.0 * np.asarray(codes, dtype=np.float64) / mu - 1.0
    return np.sign(y) * np.expm1(np.abs(y) * math.log1p(mu)) / mu


def mulaw_grid(bits: int) -> np.ndarray:
    return mulaw_decode(np.arange(2**bits), bits)


@dataclass(frozen=True)
class CodecPreset:
    """Built-in codec approximation: optional bandwidth limit, then quantization.

    ``companding`` is ``"mulaw"`` or ``"linear"`` (plain PCM rounding).
    """

    name: str
    bits: int
    companding: str = "mulaw"
    cutoff_fs: Optional[int] = None


CODEC_PRESETS = {
    p.name: p
    for p in (
        CodecPreset("pcm16", 16, "linear"),
        CodecPreset("mulaw8", 8),
        CodecPreset("mulaw6", 6),
        CodecPreset("g711", 8, cutoff_fs=8000),
        CodecPreset("mulaw6_wb", 6, cutoff_fs=16000),
    )
}


class ExternalCodec:
    """Round-trips audio through a user command that reads a WAV on stdin and writes one to stdout."""

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        if not command:
            raise InvalidArgumentError("external codec command is empty")
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, wav: Waveform) -> Waveform:
        try:
            proc = subprocess.run(
                self.command,
                input=audio_io.wav_to_bytes(wav),
                capture_output=True,
                timeout=self.timeout,
                check=False,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise CodecAdapterError(f"codec command {self.command!r} failed to run: {exc}") from exc
        stderr = proc.stderr.decode(errors="replace")
        if proc.returncode != 0:
            raise CodecAdapterError(f"codec command exited with status {proc.returncode}", stderr)
        try:
            out = audio_io.wav_from_bytes(proc.stdout)
        except Exception as exc:
            raise CodecAdapterError(f"codec command produced unreadable output: {exc}", stderr) from exc
        if out.fs != wav.fs:
            out = resample(out, wav.fs)
        n = len(wav)
        samples = out.samples[:n] if len(out) >= n else np.pad(out.samples, (0, n - len(out)))
        return wav.with_samples(samples)


def apply_codec(wav: Waveform, preset: "str | CodecPreset | ExternalCodec") -> Waveform:
    if isinstance(preset, ExternalCodec):
        return preset(wav)
    if isinstance(preset, str):
        if preset not in CODEC_PRESETS:
            raise InvalidArgumentError(f"unknown codec preset {preset!r}; known: {sorted(CODEC_PRESETS)}")
        preset = CODEC_PRESETS[preset]
    if preset.cutoff_fs is not None and preset.cutoff_fs < wav.fs:
        wav = apply_bandwidth_limit(wav, preset.cutoff_fs)
    x = np.clip(wav.samples, -1.0, 1.0)
    if preset.companding == "mulaw":
        y = mulaw_decode(mulaw_encode(x, preset.bits), preset.bits)
    elif preset.companding == "linear":
        q = 2 ** (preset.bits - 1) - 1
        y = np.round(x * q) / q
    else:
        raise InvalidArgumentError(f"unknown companding {preset.companding!r}")
    return wav.with_samples(y)


# --------------------------------------------------------------------------
# packet loss and wind
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PacketLossMask:
    """Half-open ``[start, end)`` sample ranges that were zeroed."""

    lost_segments: Tuple[Tuple[int, int], ...] = ()
    n_samples: Optional[int] = None

    def __post_init__(self):
        segs = tuple((int(s), int(e)) for s, e in self.lost_segments)
        prev_end = -1
        for s, e in segs:
            if s < 0 or e <= s or s <= prev_end:
                raise InvalidArgumentError(f"segments must be sorted, disjoint and non-empty: {segs}")
            if self.n_samples is not None and e > self.n_samples:
                raise InvalidArgumentError(f"segment {(s, e)} exceeds signal length {self.n_samples}")
            prev_end = e
        object.__setattr__(self, "lost_segments", segs)

    def to_array(self, n: Optional[int] = None) -> np.ndarray:
        n = self.n_samples if n is None else n
        mask = np.zeros(n, dtype=bool)
        for s, e in self.lost_segments:
            mask[s:e] = True
        return mask

    @property
    def lost_samples(self) -> int:
        return sum(e - s for s, e in self.lost_segments)


@dataclass(frozen=True)
class PacketLossParams:
    rate: float
    min_ms: float = 20.0
    max_ms: float = 320.0

    def __post_init__(self):
        if not 0.0 < self.rate <= 0.5:
            raise InvalidArgumentError(f"packet-loss rate must lie in (0, 0.5], got {self.rate}")
        if not 0.0 < self.min_ms <= self.max_ms:
            raise InvalidArgumentError("segment duration range must satisfy 0 < min <= max")


def sample_loss_segments(n: int, fs: int, rng: np.random.Generator, params: PacketLossParams) -> PacketLossMask:
    """Place random gaps until exactly round(rate * n) samples are lost.

    Gaps keep at least one intact sample between them so they stay disjoint.
    """
    target = int(round(params.rate * n))
    lo = max(int(round(params.min_ms * fs / 1000)), 1)
    hi = max(int(round(params.max_ms * fs / 1000)), lo)
    segs: List[Tuple[int, int]] = []
    remaining = target
    while remaining > 0:
        # free intervals with a one-sample guard next to existing gaps
        free, cursor = [], 0
        for s, e in segs:
            if s - 1 > cursor:
                free.append((cursor, s - 1))
            cursor = e + 1
        if n > cursor:
            free.append((cursor, n))
        if not free:
            break
        d = min(int(rng.integers(lo, hi + 1)), remaining)
        longest = max(b - a for a, b in free)
        d = min(d, longest)
        slots = np.array([max(b - a - d + 1, 0) for a, b in free], dtype=np.float64)
        k = int(rng.choice(len(free), p=slots / slots.sum()))
        start = free[k][0] + int(rng.integers(0, int(slots[k])))
        segs.append((start, start + d))
        segs.sort()
        remaining -= d
    return PacketLossMask(tuple(segs), n)


def apply_packet_loss(
    wav: Waveform, rng: np.random.Generator, params: PacketLossParams
) -> Tuple[Waveform, PacketLossMask]:
    mask = sample_loss_segments(len(wav), wav.fs, rng, params)
    return apply_loss_mask(wav, mask), mask


def apply_loss_mask(wav: Waveform, mask: PacketLossMask) -> Waveform:
    y = wav.samples.copy()
    y[mask.to_array(len(wav))] = 0.0
    return wav.with_samples(y)


def synth_wind(duration_s: float, fs: int, rng: np.random.Generator, intensity: float = 1.0) -> Waveform:
    """Low-frequency rumble with slowly varying gusts; RMS equals ``0.1 * intensity``."""
    if duration_s <= 0:
        raise InvalidArgumentError("duration must be positive")
    if intensity < 0:
        raise InvalidArgumentError("intensity must be non-negative")
    n = max(int(round(duration_s * fs)), 1)
    if intensity == 0:
        return Waveform(np.zeros(n), fs)
    sos = sps.butter(4, 150.0, btype="low", fs=fs, output="sos")
    rumble = sps.sosfilt(sos, rng.standard_normal(n + fs // 10))[fs // 10 :]
    # gust envelope: smoothed random walk sampled at 8 Hz, interpolated
    n_ctrl = int(math.ceil(duration_s * 8)) + 2
    ctrl = np.abs(np.cumsum(rng.standard_normal(n_ctrl))) + 0.3
    env = np.interp(np.arange(n) / fs, np.arange(n_ctrl) / 8.0, ctrl)
    x = rumble * env
    rms = math.sqrt(_power(x))
    if rms == 0:
        return Waveform(np.zeros(n), fs)
    return Waveform(x * (0.1 * intensity / rms), fs)


def spectral_centroid(x: np.ndarray, fs: int) -> float:
    mag = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    freqs = np.fft.rfftfreq(len(x), 1.0 / fs)
    return float(np.sum(freqs * mag) / max(np.sum(mag), 1e-300))


# --------------------------------------------------------------------------
# recipes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown distortion kind {self.kind!r}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params or {})
        object.__setattr__(self, "params", merged)
        self._validate()

    def _range(self, key) -> Tuple[float, float]:
        lo, hi = (float(v) for v in self.params[key])
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise InvalidArgumentError(f"{self.kind}.{key}: invalid range [{lo}, {hi}]")
        return lo, hi

    def _validate(self):
        p, k = self.params, self.kind
        if k in ("noise", "wind"):
            self._range("snr_db")
        if k == "noise" and not p.get("paths"):
            for c in p["colors"]:
                if c not in ("white", "pink", "brown"):
                    raise InvalidArgumentError(f"unknown noise color {c!r}")
        if k == "wind":
            lo, _ = self._range("intensity")
            if lo <= 0:
                raise InvalidArgumentError("wind intensity must be positive")
        if k == "reverb" and not p.get("paths"):
            lo, _ = self._range("t60")
            if lo <= 0:
                raise InvalidArgumentError("t60 must be positive")
        if k == "clipping":
            lo, hi = self._range("clip_ratio")
            if lo <= 0 or hi > 1:
                raise InvalidArgumentError("clip_ratio range must lie in (0, 1]")
        if k == "bandwidth_limit":
            bws = p["bandwidths"]
            if not bws or any(float(b) <= 0 for b in bws):
                raise InvalidArgumentError("bandwidths must be a non-empty list of positive values")
        if k == "codec":
            if not p["presets"] and not p.get("command"):
                raise InvalidArgumentError("codec needs presets or an external command")
            for name in p["presets"]:
                if name not in CODEC_PRESETS:
                    raise InvalidArgumentError(f"unknown codec preset {name!r}")
        if k == "packet_loss":
            lo, hi = self._range("rate")
            if lo <= 0 or hi > 0.5:
                raise InvalidArgumentError("packet-loss rate range must lie in (0, 0.5]")
            mlo, _ = self._range("segment_ms")
            if mlo <= 0:
                raise InvalidArgumentError("segment durations must be positive")


_SEP_KEEPS = frozenset({"bandwidth_limit", "codec"})


@dataclass(frozen=True)
class DistortionRecipe:
    """Which distortions a stage's input receives and which ones its target keeps."""

    stage: str
    mandatory: Tuple[DistortionSpec, ...] = ()
    optional: Tuple[Tuple[DistortionSpec, float], ...] = ()
    target_keeps: frozenset = frozenset()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"unknown stage {self.stage!r}")
        object.__setattr__(self, "mandatory", tuple(self.mandatory))
        object.__setattr__(self, "optional", tuple((s, float(p)) for s, p in self.optional))
        object.__setattr__(self, "target_keeps", frozenset(self.target_keeps))
        for _, prob in self.optional:
            if not 0.0 <= prob <= 1.0:
                raise InvalidArgumentError(f"probability {prob} outside [0, 1]")
        kinds = [s.kind for s in self.mandatory] + [s.kind for s, _ in self.optional]
        if len(set(kinds)) != len(kinds):
            raise InvalidArgumentError(f"distortion kinds listed twice: {kinds}")
        mand = {s.kind for s in self.mandatory}
        if self.stage == "fill":
            if "packet_loss" not in mand:
                raise InvalidArgumentError("fill recipe must always apply packet loss")
            if self.target_keeps != frozenset(KINDS) - {"packet_loss"}:
                raise InvalidArgumentError("fill target keeps every distortion except packet loss")
        elif self.stage == "sep":
            if "packet_loss" in kinds:
                raise InvalidArgumentError("sep recipe excludes packet loss")
            if self.target_keeps != _SEP_KEEPS:
                raise InvalidArgumentError("sep target keeps exactly bandwidth_limit and codec")
        else:
            if not mand <= {"bandwidth_limit", "codec", "packet_loss"}:
                raise InvalidArgumentError("res mandatory distortions must be bandwidth_limit/codec/packet_loss")
            if self.target_keeps:
                raise InvalidArgumentError("res target is the clean signal")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "mandatory": [{"kind": s.kind, "params": s.params} for s in self.mandatory],
            "optional": [{"kind": s.kind, "probability": p, "params": s.params} for s, p in self.optional],
            "target_keeps": sorted(self.target_keeps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionRecipe":
        known = {"stage", "mandatory", "optional", "target_keeps"}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown recipe keys: {sorted(unknown)}")
        stage = d["stage"]
        keeps = d.get("target_keeps")
        if keeps is None:
            keeps = default_target_keeps(stage)
        return cls(
            stage=stage,
            mandatory=tuple(DistortionSpec(m["kind"], m.get("params", {})) for m in d.get("mandatory", [])),
            optional=tuple(
                (DistortionSpec(o["kind"], o.get("params", {})), o.get("probability", 0.5)) for o in d.get("optional", [])
            ),
            target_keeps=frozenset(keeps),
        )


def default_target_keeps(stage: str) -> frozenset:
    return {"fill": frozenset(KINDS) - {"packet_loss"}, "sep": _SEP_KEEPS, "res": frozenset()}[stage]


def default_recipe(stage: str, probability: float = 0.5) -> DistortionRecipe:
    if stage == "fill":
        mandatory, optional = ["packet_loss"], ["noise", "reverb", "clipping", "wind", "bandwidth_limit", "codec"]
    elif stage == "sep":
        mandatory, optional = ["noise"], ["reverb", "clipping", "wind", "bandwidth_limit", "codec"]
    elif stage == "res":
        mandatory, optional = ["bandwidth_limit"], ["codec", "packet_loss"]
    else:
        raise InvalidArgumentError(f"unknown stage {stage!r}")
    return DistortionRecipe(
        stage,
        tuple(DistortionSpec(k) for k in mandatory),
        tuple((DistortionSpec(k), probability) for k in optional),
        default_target_keeps(stage),
    )


def full_chain_recipe(probability: float = 0.5) -> DistortionRecipe:
    """48 kHz recipe covering every distortion, used to fine-tune on earlier stages' outputs."""
    return DistortionRecipe(
        "res",
        (DistortionSpec("bandwidth_limit"),),
        tuple(
            (DistortionSpec(k), probability)
            for k in ("noise", "reverb", "clipping", "wind", "codec", "packet_loss")
        ),
        frozenset(),
    )


def load_recipe(path) -> DistortionRecipe:
    with open(path) as fh:
        return DistortionRecipe.from_dict(yaml.safe_load(fh))


def save_recipe(recipe: DistortionRecipe, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(recipe.to_dict(), fh, sort_keys=False)


# --------------------------------------------------------------------------
# sampling and rendering
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Draw:
    """One sampled distortion with every concrete parameter needed to replay it."""

    kind: str
    params: Dict[str, object]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "Draw":
        return cls(d["kind"], dict(d["params"]))


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = (float(v) for v in bounds)
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**32 - 1))


def sample_draw(spec: DistortionSpec, rng: np.random.Generator, n: int, fs: int) -> Optional[Draw]:
    p, k = spec.params, spec.kind
    if k == "noise":
        out = {"snr_db": _uniform(rng, p["snr_db"])}
        if p.get("paths"):
            out["path"] = str(p["paths"][int(rng.integers(len(p["paths"])))])
        else:
            out["color"] = str(p["colors"][int(rng.integers(len(p["colors"])))])
        out["seed"] = _seed(rng)
        return Draw(k, out)
    if k == "wind":
        return Draw(k, {"snr_db": _uniform(rng, p["snr_db"]), "intensity": _uniform(rng, p["intensity"]), "seed": _seed(rng)})
    if k == "reverb":
        if p.get("paths"):
            return Draw(k, {"path": str(p["paths"][int(rng.integers(len(p["paths"])))])})
        return Draw(k, {"t60": _uniform(rng, p["t60"]), "seed": _seed(rng)})
    if k == "clipping":
        return Draw(k, {"clip_ratio": _uniform(rng, p["clip_ratio"])})
    if k == "bandwidth_limit":
        rates = sorted({int(round(2 * float(b))) for b in p["bandwidths"]} & set(SUPPORTED_RATES))
        rates = [r for r in rates if r < fs]
        if not rates:
            return None
        return Draw(k, {"cutoff_fs": rates[int(rng.integers(len(rates)))]})
    if k == "codec":
        if p.get("command"):
            return Draw(k, {"command": list(p["command"])})
        names = list(p["presets"])
        return Draw(k, {"preset": names[int(rng.integers(len(names)))]})
    if k == "packet_loss":
        lp = PacketLossParams(_uniform(rng, p["rate"]), *(float(v) for v in p["segment_ms"]))
        mask = sample_loss_segments(n, fs, rng, lp)
        return Draw(k, {"rate": lp.rate, "segments": [list(s) for s in mask.lost_segments]})
    raise InvalidArgumentError(f"unknown distortion kind {k!r}")


def sample_draws(recipe: DistortionRecipe, rng: np.random.Generator, n: int, fs: int) -> List[Draw]:
    chosen = list(recipe.mandatory)
    for spec, prob in recipe.optional:
        if rng.random() < prob:
            chosen.append(spec)
    chosen.sort(key=lambda s: APPLY_ORDER.index(s.kind))
    draws = []
    for spec in chosen:
        d = sample_draw(spec, rng, n, fs)
        if d is not None:
            draws.append(d)
    return draws


def _load_at(path: str, fs: int) -> Waveform:
    w = audio_io.read_wav(path)
    return w if w.fs == fs else resample(w, fs)


def render_draw(wav: Waveform, draw: Draw) -> Waveform:
    p, k = draw.params, draw.kind
    if k == "noise":
        rng = np.random.default_rng(p["seed"])
        if "path" in p:
            src = _load_at(p["path"], wav.fs).samples
            offset = int(rng.integers(0, max(len(src) - len(wav), 0) + 1))
            noise = Waveform(src[offset:], wav.fs) if len(src) > offset else Waveform(src, wav.fs)
        else:
            noise = Waveform(synth_noise(len(wav), wav.fs, rng, p["color"]), wav.fs)
        return apply_noise(wav, noise, p["snr_db"])
    if k == "wind":
        gust = synth_wind(len(wav) / wav.fs, wav.fs, np.random.default_rng(p["seed"]), p["intensity"])
        return apply_noise(wav, gust, p["snr_db"])
    if k == "reverb":
        if "path" in p:
            rir = _load_at(p["path"], wav.fs)
        else:
            rir = Waveform(synth_rir(wav.fs, p["t60"], np.random.default_rng(p["seed"])), wav.fs)
        return apply_reverb(wav, rir)
    if k == "clipping":
        return apply_clip(wav, p["clip_ratio"])
    if k == "bandwidth_limit":
        return apply_bandwidth_limit(wav, int(p["cutoff_fs"]))
    if k == "codec":
        if "command" in p:
            return apply_codec(wav, ExternalCodec(p["command"]))
        return apply_codec(wav, p["preset"])
    if k == "packet_loss":
        return apply_loss_mask(wav, PacketLossMask(tuple(tuple(s) for s in p["segments"]), len(wav)))
    raise InvalidArgumentError(f"unknown distortion kind {k!r}")


def render(clean: Waveform, draws: Sequence[Draw]) -> Waveform:
    out = clean
    for d in draws:
        out = render_draw(out, d)
    return out


def mask_from_draws(draws: Sequence[Draw], n: int) -> Optional[PacketLossMask]:
    for d in draws:
        if d.kind == "packet_loss":
            return PacketLossMask(tuple(tuple(s) for s in d.params["segments"]), n)
    return None


@dataclass
class SimulatedPair:
    input: Waveform
    target: Waveform
    mask: Optional[PacketLossMask]
    draws: List[Draw]
    source_fs: int

    def provenance(self) -> dict:
        return {
            "fs": self.input.fs,
            "source_fs": self.source_fs,
            "n_samples": len(self.input),
            "draws": [d.to_dict() for d in self.draws],
        }


def conform_rate(clean: Waveform, stage: str) -> Waveform:
    """Apply a stage's training-rate policy to a clean source signal."""
    if stage in ("fill", "sep"):
        if clean.fs < 16000:
            raise UnsupportedRateError(f"{stage} training needs sources of at least 16 kHz, got {clean.fs}")
        return clean if clean.fs == 16000 else resample(clean, 16000)
    if stage == "res":
        if clean.fs != 48000:
            raise UnsupportedRateError(f"res training uses 48 kHz sources only, got {clean.fs}")
        return clean
    raise InvalidArgumentError(f"unknown stage {stage!r}")


def simulate_pair(clean: Waveform, recipe: DistortionRecipe, rng: np.random.Generator) -> SimulatedPair:
    source_fs = clean.fs
    clean = conform_rate(clean, recipe.stage)
    draws = sample_draws(recipe, rng, len(clean), clean.fs)
    noisy = render(clean, draws)
    target = render(clean, [d for d in draws if d.kind in recipe.target_keeps])
    return SimulatedPair(noisy, target, mask_from_draws(draws, len(clean)), draws, source_fs)


def replay(clean: Waveform, provenance: dict, stage: Optional[str] = None) -> Waveform:
    """Rebuild a simulated input from its clean source and provenance record."""
    if stage is not None:
        clean = conform_rate(clean, stage)
    elif clean.fs != provenance["fs"]:
        clean = resample(clean, provenance["fs"])
    return render(clean, [Draw.from_dict(d) for d in provenance["draws"]])


def recipe_from_file_or_default(path: Optional[str | Path], stage: str) -> DistortionRecipe:
    return load_recipe(path) if path else default_recipe(stage)
