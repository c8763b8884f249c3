"""Signal and spectrogram fidelity terms and the base regression composite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
import torch

from ..dsp import DEFAULT_STFT, ComplexSpectrogram, StftConfig, Waveform, stft_tensor
from ..errors import DegenerateReferenceError, InvalidArgumentError, ShapeMismatchError

EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    sdr: float = 2.0
    lsd: float = 1.5
    mag: float = 70.0
    real: float = 30.0
    imag: float = 30.0
    mcd: float = 0.004
    pesq: float = 0.5
    utmos: float = 0.5
    dnsmos: float = 0.4
    wavlm: float = 2.5
    recon: float = 20.0
    adv: float = 1.0
    feat: float = 1.0
    jft_l2: float = 10.0
    jft_adv: float = 1.0
    jft_feat: float = 0.2

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise InvalidArgumentError(f"loss weight {k} must be a finite non-negative number, got {v}")


@dataclass
class LossReport:
    """Per-term values, the weight applied to each, and their weighted sum."""

    terms: Dict[str, torch.Tensor]
    weights: Dict[str, float]
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        if set(self.terms) != set(self.weights):
            raise InvalidArgumentError("every term needs exactly one weight")
        total = None
        for k, v in self.terms.items():
            part = self.weights[k] * v
            total = part if total is None else total + part
        self.total = total if total is not None else torch.zeros(())

    def values(self) -> Dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


# Input coercion ---------------------------------------------------------------------


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        return torch.from_numpy(x.samples)
    if isinstance(x, ComplexSpectrogram):
        return torch.from_numpy(x.data)
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    """sqrt with a zero (not infinite) gradient at zero."""
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def floored_mag(spec: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return torch.sqrt(torch.clamp(spec.real**2 + spec.imag**2, min=eps**2))


# Terms -------------------------------------------------------------------------------


def sdr_loss(s, s_hat, eps: float = EPS) -> torch.Tensor:
    """-log10(|s|^2 / (|s - s_hat|^2 + eps)) over the last axis, averaged over the rest."""
    s, s_hat = _pair(s, s_hat)
    power = (s**2).sum(-1)
    if bool((power == 0).any()):
        raise DegenerateReferenceError("reference signal has zero power")
    err = ((s - s_hat) ** 2).sum(-1)
    return (-torch.log10(power / (err + eps))).mean()


def lsd_loss(spec, spec_hat, eps: float = EPS) -> torch.Tensor:
    """Per-frame RMS over frequency of log10 magnitude ratios, averaged over frames. Input (..., T, F)."""
    spec, spec_hat = _pair(spec, spec_hat)
    ratio = torch.log10(floored_mag(spec, eps) / floored_mag(spec_hat, eps))
    return safe_sqrt((ratio**2).mean(-1)).mean()


def mag_loss(spec, spec_hat, eps: float = EPS) -> torch.Tensor:
    spec, spec_hat = _pair(spec, spec_hat)
    return ((floored_mag(spec, eps) ** 0.3 - floored_mag(spec_hat, eps) ** 0.3) ** 2).mean()


def phase_real_loss(spec, spec_hat, eps: float = EPS) -> torch.Tensor:
    spec, spec_hat = _pair(spec, spec_hat)
    a = spec.real / floored_mag(spec, eps) ** 0.7
    b = spec_hat.real / floored_mag(spec_hat, eps) ** 0.7
    return ((a - b) ** 2).mean()


def phase_imag_loss(spec, spec_hat, eps: float = EPS) -> torch.Tensor:
    spec, spec_hat = _pair(spec, spec_hat)
    a = spec.imag / floored_mag(spec, eps) ** 0.7
    b = spec_hat.imag / floored_mag(spec_hat, eps) ** 0.7
    return ((a - b) ** 2).mean()


def _resolve_fs(s, fs: Optional[int]) -> int:
    if isinstance(s, Waveform):
        return s.fs
    if fs is None:
        raise InvalidArgumentError("sampling rate required for tensor inputs")
    return fs


def spectrogram(x: torch.Tensor, fs: int, stft_cfg: StftConfig = DEFAULT_STFT) -> torch.Tensor:
    return stft_tensor(x, stft_cfg.fft_size(fs), stft_cfg.hop_size(fs), stft_cfg.window)


def l1_terms(s, s_hat, fs: Optional[int] = None, stft_cfg: StftConfig = DEFAULT_STFT) -> Dict[str, torch.Tensor]:
    fs = _resolve_fs(s, fs)
    s, s_hat = _pair(s, s_hat)
    spec, spec_hat = spectrogram(s, fs, stft_cfg), spectrogram(s_hat, fs, stft_cfg)
    return {
        "sdr": sdr_loss(s, s_hat),
        "lsd": lsd_loss(spec, spec_hat),
        "mag": mag_loss(spec, spec_hat),
        "real": phase_real_loss(spec, spec_hat),
        "imag": phase_imag_loss(spec, spec_hat),
    }


L1_TERMS = ("sdr", "lsd", "mag", "real", "imag")


def l1_composite(
    s, s_hat, weights: LossWeights = LossWeights(), fs: Optional[int] = None, stft_cfg: StftConfig = DEFAULT_STFT
) -> LossReport:
    """Base regression objective: SDR + LSD + compressed magnitude + compressed real/imag parts."""
    terms = l1_terms(s, s_hat, fs, stft_cfg)
    return LossReport(terms, {k: getattr(weights, k) for k in L1_TERMS})


# Reconstruction term for the GAN stages -----------------------------------------------


def log_mel_l1_loss(s, s_hat, fs: int, stft_cfg: StftConfig = DEFAULT_STFT, n_mels: int = 80, floor: float = 1e-5) -> torch.Tensor:
    """Mean absolute difference of log mel magnitude spectrograms (HiFi-GAN style)."""
    from .metric import mel_filterbank

    s, s_hat = _pair(s, s_hat)
    a = spectrogram(s, fs, stft_cfg).abs()
    b = spectrogram(s_hat, fs, stft_cfg).abs()
    fb = mel_filterbank(a.shape[-1], fs, n_mels, dtype=a.dtype)
    return (torch.log(torch.clamp(a @ fb, min=floor)) - torch.log(torch.clamp(b @ fb, min=floor))).abs().mean()
