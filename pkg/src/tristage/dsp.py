"""Time-frequency transforms, resampling and channel-wise subband split/merge.

Every transform exists in two flavours: a tensor kernel (``*_tensor``) that is
differentiable and batch-aware, used by the networks and losses, and a thin
numpy-facing wrapper operating on :class:`Waveform` / :class:`ComplexSpectrogram`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from scipy import signal as sps

from .errors import InvalidArgumentError, ShapeMismatchError, UnsupportedRateError

SUPPORTED_RATES = (8000, 16000, 22050, 24000, 32000, 44100, 48000)
FULLBAND_RATE = 48000
NUM_SUBBANDS = 3


def check_rate(fs: int) -> int:
    if int(fs) != fs or int(fs) not in SUPPORTED_RATES:
        raise UnsupportedRateError(f"unsupported sampling rate {fs}; expected one of {SUPPORTED_RATES}")
    return int(fs)


@dataclass(frozen=True)
class Waveform:
    """Mono audio signal with its sampling frequency."""

    samples: np.ndarray
    fs: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeMismatchError(f"waveform must be 1-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("waveform contains NaN or Inf")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "fs", check_rate(self.fs))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.fs

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.fs)


@dataclass(frozen=True)
class StftConfig:
    """Analysis settings expressed in milliseconds so they apply at any rate.

    The FFT size equals the window length in samples; the hop is half of it.
    """

    window: str = "hann"
    win_len_ms: float = 32.0
    hop_ms: float = 16.0

    def __post_init__(self):
        if self.window not in ("hann", "boxcar"):
            raise InvalidArgumentError(f"unknown window {self.window!r}")
        if not math.isclose(2 * self.hop_ms, self.win_len_ms):
            raise InvalidArgumentError("hop must be half the window length")

    def fft_size(self, fs: int) -> int:
        return int(round(fs * self.win_len_ms / 1000.0))

    def hop_size(self, fs: int) -> int:
        return self.fft_size(fs) // 2

    def n_freqs(self, fs: int) -> int:
        return self.fft_size(fs) // 2 + 1

    def n_frames(self, n_samples: int, fs: int) -> int:
        return math.ceil(n_samples / self.hop_size(fs))


DEFAULT_STFT = StftConfig()


@dataclass(frozen=True)
class ComplexSpectrogram:
    data: np.ndarray  # (T, F) complex
    cfg: StftConfig
    fs: int

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ShapeMismatchError(f"spectrogram must be T x F, got {d.shape}")
        if d.shape[1] != self.cfg.n_freqs(self.fs):
            raise ShapeMismatchError(
                f"{d.shape[1]} frequency bins inconsistent with fs={self.fs} (expected {self.cfg.n_freqs(self.fs)})"
            )
        if not np.all(np.isfinite(d)):
            raise InvalidArgumentError("spectrogram contains NaN or Inf")
        object.__setattr__(self, "data", d.astype(np.complex128))

    @property
    def shape(self):
        return self.data.shape


# --------------------------------------------------------------------------
# tensor kernels
# --------------------------------------------------------------------------


def analysis_window(kind: str, n: int, dtype=torch.float64, device=None) -> torch.Tensor:
    if kind == "hann":
        return torch.hann_window(n, periodic=True, dtype=dtype, device=device)
    if kind == "boxcar":
        return torch.ones(n, dtype=dtype, device=device)
    raise InvalidArgumentError(f"unknown window {kind!r}")


def _pad_1d(x: torch.Tensor, left: int, right: int) -> torch.Tensor:
    # reflect where the signal is long enough, zeros otherwise (tiny inputs)
    n = x.shape[-1]
    flat = x.reshape(-1, 1, n)
    if left < n and right < n:
        flat = F.pad(flat, (left, right), mode="reflect")
    else:
        flat = F.pad(flat, (left, right))
    return flat.reshape(*x.shape[:-1], -1)


def stft_tensor(x: torch.Tensor, n_fft: int, hop: int, window: str = "hann") -> torch.Tensor:
    """Centered STFT of ``x`` (..., N) -> complex (..., T, n_fft//2+1) with T = ceil(N / hop)."""
    n = x.shape[-1]
    if n == 0:
        raise InvalidArgumentError("empty signal")
    n_frames = math.ceil(n / hop)
    left = n_fft // 2
    right = (n_frames - 1) * hop + n_fft - n - left
    xp = _pad_1d(x, left, max(right, 0))
    frames = xp.unfold(-1, n_fft, hop)[..., :n_frames, :]
    w = analysis_window(window, n_fft, dtype=x.dtype, device=x.device)
    return torch.fft.rfft(frames * w, n=n_fft, dim=-1)


def istft_tensor(spec: torch.Tensor, n_fft: int, hop: int, length: int, window: str = "hann") -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft_tensor`; output trimmed/zero-padded to ``length``."""
    if spec.shape[-1] != n_fft // 2 + 1:
        raise ShapeMismatchError(f"{spec.shape[-1]} bins inconsistent with n_fft={n_fft}")
    lead = spec.shape[:-2]
    n_frames = spec.shape[-2]
    real_dtype = spec.real.dtype
    w = analysis_window(window, n_fft, dtype=real_dtype, device=spec.device)
    frames = torch.fft.irfft(spec, n=n_fft, dim=-1) * w  # (..., T, n_fft)
    frames = frames.reshape(-1, n_frames, n_fft).transpose(1, 2)  # (B, n_fft, T)
    total = (n_frames - 1) * hop + n_fft
    ola = F.fold(frames, output_size=(1, total), kernel_size=(1, n_fft), stride=(1, hop))
    env = F.fold(
        (w * w).reshape(1, n_fft, 1).expand(1, n_fft, n_frames),
        output_size=(1, total),
        kernel_size=(1, n_fft),
        stride=(1, hop),
    )
    env = env.reshape(-1)
    y = ola.reshape(ola.shape[0], total) / torch.where(env > 1e-11, env, torch.ones_like(env))
    start = n_fft // 2
    y = y[:, start : start + length]
    if y.shape[-1] < length:
        y = F.pad(y, (0, length - y.shape[-1]))
    return y.reshape(*lead, length)


# --------------------------------------------------------------------------
# numpy-facing operations
# --------------------------------------------------------------------------


def stft(wav: Waveform, cfg: StftConfig = DEFAULT_STFT) -> ComplexSpectrogram:
    if len(wav) == 0:
        raise InvalidArgumentError("empty waveform")
    n_fft, hop = cfg.fft_size(wav.fs), cfg.hop_size(wav.fs)
    spec = stft_tensor(torch.from_numpy(wav.samples), n_fft, hop, cfg.window)
    return ComplexSpectrogram(spec.numpy(), cfg, wav.fs)


def istft(spec: ComplexSpectrogram, cfg: StftConfig | None = None, out_len: int | None = None) -> Waveform:
    cfg = cfg or spec.cfg
    if cfg != spec.cfg:
        raise ShapeMismatchError("spectrogram was computed with a different StftConfig")
    n_fft, hop = cfg.fft_size(spec.fs), cfg.hop_size(spec.fs)
    if out_len is None:
        out_len = spec.shape[0] * hop
    y = istft_tensor(torch.from_numpy(spec.data), n_fft, hop, int(out_len), cfg.window)
    return Waveform(y.numpy(), spec.fs)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

RESAMPLER_ATTENUATION_DB = 80.0


@lru_cache(maxsize=64)
def _resampling_filter(up: int, down: int) -> np.ndarray:
    # Kaiser lowpass at the polyphase rate. Passband ends at 0.9 of the lower
    # Nyquist and the stopband begins exactly at it, so no image or alias
    # lands below the stop edge.
    rate = float(max(up, down))
    nyq_lo = 1.0 / rate  # lower Nyquist, normalized so that 1.0 = Nyquist at the polyphase rate
    width = 0.1 * nyq_lo
    numtaps, beta = sps.kaiserord(RESAMPLER_ATTENUATION_DB, width)
    numtaps |= 1
    # resample_poly applies the ``up`` gain itself
    return sps.firwin(numtaps, nyq_lo - width / 2, window=("kaiser", beta))


def resample_array(x: np.ndarray, fs: int, target_fs: int) -> np.ndarray:
    fs, target_fs = check_rate(fs), check_rate(target_fs)
    if fs == target_fs:
        return np.array(x, dtype=np.float64, copy=True)
    ratio = Fraction(target_fs, fs)
    up, down = ratio.numerator, ratio.denominator
    y = sps.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=_resampling_filter(up, down))
    n_out = int(round(len(x) * target_fs / fs))
    if y.shape[0] >= n_out:
        return y[:n_out]
    return np.pad(y, (0, n_out - y.shape[0]))


def resample(wav: Waveform, target_fs: int) -> Waveform:
    return Waveform(resample_array(wav.samples, wav.fs, target_fs), target_fs)


# --------------------------------------------------------------------------
# channel-wise subband (CWS) split / merge
# --------------------------------------------------------------------------


def subband_edges(n_freqs: int, n_bands: int = NUM_SUBBANDS) -> List[int]:
    """Equal-width band boundaries in bins; the Nyquist bin goes to the top band."""
    step = (n_freqs - 1) // n_bands
    return [i * step for i in range(n_bands)] + [n_freqs]


@dataclass(frozen=True)
class SubbandStack:
    bands: List[np.ndarray]
    band_edges: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.bands) != NUM_SUBBANDS:
            raise ShapeMismatchError(f"expected {NUM_SUBBANDS} bands, got {len(self.bands)}")

    @property
    def band_width(self) -> int:
        return max(b.shape[1] for b in self.bands)

    def as_channels(self) -> np.ndarray:
        """Zero-pad every band to the widest one and stack to (3, T, F_b)."""
        width = self.band_width
        return np.stack([np.pad(b, ((0, 0), (0, width - b.shape[1]))) for b in self.bands])


def cws_split(spec: ComplexSpectrogram) -> SubbandStack:
    if spec.fs != FULLBAND_RATE:
        raise UnsupportedRateError(f"CWS split requires {FULLBAND_RATE} Hz input, got {spec.fs}")
    edges = subband_edges(spec.shape[1])
    bands = [spec.data[:, lo:hi].copy() for lo, hi in zip(edges[:-1], edges[1:])]
    return SubbandStack(bands, edges)


def cws_merge(stack: SubbandStack, cfg: StftConfig = DEFAULT_STFT) -> ComplexSpectrogram:
    if len(stack.bands) != NUM_SUBBANDS:
        raise ShapeMismatchError(f"expected {NUM_SUBBANDS} bands, got {len(stack.bands)}")
    data = np.concatenate(stack.bands, axis=1)
    return ComplexSpectrogram(data, cfg, FULLBAND_RATE)


def cws_split_tensor(spec: torch.Tensor, n_bands: int = NUM_SUBBANDS) -> torch.Tensor:
    """Complex (B, T, F) -> real (B, 2*n_bands, T, F_b), channels ordered (re, im) per band."""
    n_freqs = spec.shape[-1]
    edges = subband_edges(n_freqs, n_bands)
    width = max(hi - lo for lo, hi in zip(edges[:-1], edges[1:]))
    chans = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        band = F.pad(spec[..., lo:hi], (0, width - (hi - lo)))
        chans += [band.real, band.imag]
    return torch.stack(chans, dim=1)


def cws_merge_tensor(chans: torch.Tensor, n_freqs: int, n_bands: int = NUM_SUBBANDS) -> torch.Tensor:
    """Inverse of :func:`cws_split_tensor`: real (B, 2*n_bands, T, F_b) -> complex (B, T, F)."""
    if chans.shape[1] != 2 * n_bands:
        raise ShapeMismatchError(f"expected {2 * n_bands} channels, got {chans.shape[1]}")
    edges = subband_edges(n_freqs, n_bands)
    parts = []
    for b, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        parts.append(torch.complex(chans[:, 2 * b, :, : hi - lo], chans[:, 2 * b + 1, :, : hi - lo]))
    return torch.cat(parts, dim=-1)


def band_split_tensor(x: torch.Tensor, n_bands: int = NUM_SUBBANDS) -> torch.Tensor:
    """Brick-wall FFT band split of a waveform (..., N) -> (..., n_bands, N); bands sum to ``x``."""
    n = x.shape[-1]
    spec = torch.fft.rfft(x, dim=-1)
    edges = subband_edges(spec.shape[-1], n_bands)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = torch.zeros(spec.shape[-1], dtype=x.dtype, device=x.device)
        mask[lo:hi] = 1.0
        out.append(torch.fft.irfft(spec * mask, n=n, dim=-1))
    return torch.stack(out, dim=-2)


def band_energy_fraction(x: np.ndarray, fs: int, f_lo: float, f_hi: float | None = None) -> float:
    """Fraction of total energy of ``x`` in [f_lo, f_hi) Hz.

    Uses a Hann-tapered periodogram; a rectangular one would report the
    wrap-around discontinuity as broadband leakage.
    """
    x = np.asarray(x, dtype=np.float64)
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)))) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / fs)
    f_hi = fs / 2 + 1 if f_hi is None else f_hi
    total = spec.sum()
    if total == 0:
        return 0.0
    return float(spec[(freqs >= f_lo) & (freqs < f_hi)].sum() / total)
