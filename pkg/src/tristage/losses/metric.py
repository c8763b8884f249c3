"""Metric-aware terms: MFCC distance, feature distillation and pluggable quality scorers.

The quality scorers shipped here are deterministic stand-ins (fixed-weight
networks over log-mel features) so the whole loss stack runs offline. Real
pretrained predictors can be registered in their place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dsp import DEFAULT_STFT, StftConfig, stft_tensor
from ..errors import InvalidArgumentError, ShapeMismatchError
from .spectral import EPS, _pair, as_tensor


# Mel / MFCC -----------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=64)
def _mel_fb_np(n_freqs: int, fs: int, n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular filters with peaks equally spaced on the HTK mel scale, shape (F, n_mels)."""
    freqs = np.linspace(0.0, fs / 2.0, n_freqs)
    pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, mid, hi = pts[:-2], pts[1:-1], pts[2:]
    up = (freqs[:, None] - lo) / (mid - lo)
    down = (hi - freqs[:, None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_filterbank(n_freqs: int, fs: int, n_mels: int, f_min: float = 0.0, f_max: Optional[float] = None, dtype=torch.float64):
    f_max = fs / 2.0 if f_max is None else f_max
    return torch.from_numpy(_mel_fb_np(n_freqs, fs, n_mels, float(f_min), float(f_max))).to(dtype)


@lru_cache(maxsize=16)
def _dct_np(n_in: int, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, shape (n_in, n_out)."""
    n = np.arange(n_in)[:, None]
    k = np.arange(n_out)[None, :]
    m = np.cos(np.pi / n_in * (n + 0.5) * k) * np.sqrt(2.0 / n_in)
    m[:, 0] /= np.sqrt(2.0)
    return m


@dataclass(frozen=True)
class MfccConfig:
    n_mels: int = 80
    n_mfcc: int = 13
    f_min: float = 0.0
    f_max: Optional[float] = None
    log_floor: float = EPS
    stft: StftConfig = DEFAULT_STFT
    n_fft: Optional[int] = None  # explicit sizes override the stft config (tiny toys)
    hop: Optional[int] = None

    def __post_init__(self):
        if self.n_mfcc > self.n_mels or self.n_mfcc <= 0:
            raise InvalidArgumentError("need 0 < n_mfcc <= n_mels")

    def sizes(self, fs: int):
        n_fft = self.n_fft or self.stft.fft_size(fs)
        hop = self.hop or (n_fft // 2 if self.n_fft else self.stft.hop_size(fs))
        return n_fft, hop


def log_mel(x: torch.Tensor, fs: int, cfg: MfccConfig = MfccConfig()) -> torch.Tensor:
    """Natural-log mel power spectrogram, (..., T, n_mels)."""
    n_fft, hop = cfg.sizes(fs)
    if x.shape[-1] < n_fft:
        raise InvalidArgumentError(f"signal of {x.shape[-1]} samples is shorter than one {n_fft}-sample frame")
    spec = stft_tensor(x, n_fft, hop, cfg.stft.window)
    power = spec.real**2 + spec.imag**2
    fb = mel_filterbank(power.shape[-1], fs, cfg.n_mels, cfg.f_min, cfg.f_max, dtype=power.dtype)
    return torch.log(power @ fb + cfg.log_floor)


def mfcc(x, fs: int, cfg: MfccConfig = MfccConfig()) -> torch.Tensor:
    x = as_tensor(x)
    lm = log_mel(x, fs, cfg)
    return lm @ torch.from_numpy(_dct_np(cfg.n_mels, cfg.n_mfcc)).to(lm.dtype)


def mcd_aware_loss(s, s_hat, fs: int, mfcc_cfg: MfccConfig = MfccConfig()) -> torch.Tensor:
    """MSE between MFCC matrices of reference and estimate."""
    s, s_hat = _pair(s, s_hat)
    return ((mfcc(s, fs, mfcc_cfg) - mfcc(s_hat, fs, mfcc_cfg)) ** 2).mean()


# Feature distillation ------------------------------------------------------------------


def wavlm_distill_loss(feats, feats_hat, eps: float = EPS) -> torch.Tensor:
    """-1/(T*D) sum_t sum_d log10(sigmoid(cos_d)), cosine per feature dimension across time.

    The summand does not depend on t, so the double sum reduces to a mean over
    dimensions. Inputs are (..., T, D); leading axes are averaged.
    """
    feats, feats_hat = _pair(feats, feats_hat)
    if feats.dim() < 2:
        raise ShapeMismatchError("features must be (..., T, D)")
    dot = (feats * feats_hat).sum(-2)
    na = torch.linalg.vector_norm(feats, dim=-2).clamp_min(eps)
    nb = torch.linalg.vector_norm(feats_hat, dim=-2).clamp_min(eps)
    cos = dot / (na * nb)
    return (-torch.log10(torch.sigmoid(cos))).mean()


class StandInFeatureExtractor(nn.Module):
    """Fixed random strided-conv encoder standing in for a self-supervised speech model."""

    def __init__(self, dim: int = 32, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv1d(1, dim, 4, stride=2)
        self.conv2 = nn.Conv1d(dim, dim, 3, stride=2)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / math.sqrt(fan_in))
                conv.bias.zero_()
        self.requires_grad_(False)

    def forward(self, x):  # (..., N) -> (..., T, D)
        lead = x.shape[:-1]
        y = x.reshape(-1, 1, x.shape[-1]).to(self.conv1.weight.dtype)
        y = F.gelu(self.conv2(F.gelu(self.conv1(y))))
        return y.transpose(1, 2).reshape(*lead, y.shape[-1], y.shape[1])


# Quality scorers ------------------------------------------------------------------------


@dataclass
class MetricScorer:
    """A differentiable score; intrusive scorers also take the clean reference.

    ``offset`` and ``scale`` define the affine normalisation used when the
    score becomes a loss: loss = -(score - offset) / scale.
    """

    name: str
    fn: Callable[..., torch.Tensor]
    reference_free: bool
    offset: float = 0.0
    scale: float = 1.0
    is_quality: bool = True

    def score(self, s_hat, s=None, fs: int = 16000) -> torch.Tensor:
        s_hat = as_tensor(s_hat)
        if self.reference_free:
            return self.fn(s_hat, fs=fs)
        if s is None:
            raise InvalidArgumentError(f"scorer {self.name!r} needs a clean reference")
        s, s_hat = _pair(s, s_hat)
        return self.fn(s_hat, s, fs=fs)


_FEATURE_CFG = MfccConfig(n_mels=20, n_mfcc=13)


def _toy_features(x: torch.Tensor, fs: int) -> torch.Tensor:
    # signals shorter than one 32 ms frame fall back to the largest power-of-two FFT that fits
    n_fft, _ = _FEATURE_CFG.sizes(fs)
    cfg = _FEATURE_CFG if x.shape[-1] >= n_fft else MfccConfig(n_mels=20, n_mfcc=13, n_fft=_pow2_at_most(x.shape[-1]))
    return log_mel(x, fs, cfg)


def _pow2_at_most(n: int) -> int:
    return max(2, 1 << (max(n, 2).bit_length() - 1))


class _StandInMOS(nn.Module):
    """Pooled log-mel statistics -> fixed MLP -> score in (1, 5)."""

    def __init__(self, seed: int, hidden: int = 16):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(torch.randn(40, hidden, generator=g, dtype=torch.float64) / math.sqrt(40), requires_grad=False)
        self.b1 = nn.Parameter(0.1 * torch.randn(hidden, generator=g, dtype=torch.float64), requires_grad=False)
        self.w2 = nn.Parameter(torch.randn(hidden, generator=g, dtype=torch.float64) / math.sqrt(hidden), requires_grad=False)

    def forward(self, x, fs: int):
        lm = _toy_features(x, fs).to(torch.float64)
        lm = lm - lm.mean(-1, keepdim=True).mean(-2, keepdim=True)  # gain invariance
        stats = torch.cat([lm.mean(-2), lm.std(-2, unbiased=False) if lm.shape[-2] > 1 else torch.zeros_like(lm[..., 0, :])], -1)
        h = torch.tanh(stats @ self.w1 + self.b1)
        return (1.0 + 4.0 * torch.sigmoid(h @ self.w2)).mean()


class _StandInPESQ(nn.Module):
    """Intrusive stand-in: 1 + 3.5 * exp(-weighted log-mel distance)."""

    def __init__(self, seed: int = 7):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.band_w = nn.Parameter(0.5 + torch.rand(20, generator=g, dtype=torch.float64), requires_grad=False)

    def forward(self, s_hat, s, fs: int):
        a = _toy_features(s_hat, fs).to(torch.float64)
        b = _toy_features(s, fs).to(torch.float64)
        d = (((a - b) ** 2) * self.band_w).mean()
        return 1.0 + 3.5 * torch.exp(-0.1 * d)


_STANDINS: Dict[str, nn.Module] = {}


def _standin(name: str) -> nn.Module:
    if name not in _STANDINS:
        _STANDINS[name] = {"pesq": lambda: _StandInPESQ(7), "utmos": lambda: _StandInMOS(11), "dnsmos": lambda: _StandInMOS(23)}[name]()
    return _STANDINS[name]


def _standin_wavlm():
    if "wavlm" not in _STANDINS:
        _STANDINS["wavlm"] = StandInFeatureExtractor().double()
    return _STANDINS["wavlm"]


def _wavlm_fn(s_hat, s, fs: int):
    ext = _standin_wavlm()
    return wavlm_distill_loss(ext(s.to(torch.float64)), ext(s_hat.to(torch.float64)))


def _mcd_fn(s_hat, s, fs: int):
    return mcd_aware_loss(s, s_hat, fs)


_REGISTRY: Dict[str, MetricScorer] = {}


def register_scorer(scorer: MetricScorer) -> None:
    """Add or replace a scorer, e.g. an adapter around a real pretrained predictor."""
    _REGISTRY[scorer.name] = scorer


def get_scorer(name: str) -> MetricScorer:
    if name not in _REGISTRY:
        raise InvalidArgumentError(f"no scorer registered under {name!r}")
    return _REGISTRY[name]


def reset_scorers() -> None:
    _REGISTRY.clear()
    register_scorer(MetricScorer("mcd", _mcd_fn, reference_free=False, is_quality=False))
    register_scorer(MetricScorer("pesq", lambda s_hat, s, fs: _standin("pesq")(s_hat, s, fs), reference_free=False))
    register_scorer(MetricScorer("utmos", lambda s_hat, fs: _standin("utmos")(s_hat, fs), reference_free=True))
    register_scorer(MetricScorer("dnsmos", lambda s_hat, fs: _standin("dnsmos")(s_hat, fs), reference_free=True))
    register_scorer(MetricScorer("wavlm", _wavlm_fn, reference_free=False, is_quality=False))


reset_scorers()


def scored_metric_loss(scorer: MetricScorer | str, s_hat, s=None, fs: int = 16000) -> torch.Tensor:
    """Quality scores become losses as -(score - offset)/scale; distance-type scorers pass through."""
    if isinstance(scorer, str):
        scorer = get_scorer(scorer)
    if not scorer.reference_free and s is None:
        raise InvalidArgumentError(f"scorer {scorer.name!r} needs a clean reference")
    value = scorer.score(s_hat, s, fs)
    if scorer.is_quality:
        return -(value - scorer.offset) / scorer.scale
    return value
