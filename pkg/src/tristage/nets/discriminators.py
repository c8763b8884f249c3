"""Waveform discriminators: multi-period, multi-resolution and multi-band.

Layer layouts follow the HiFi-GAN / BigVGAN / MelGAN designs. ``width``
scales every hidden channel count, which keeps desk-scale toy runs cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from ..dsp import band_split_tensor
from ..errors import InvalidArgumentError

LRELU_SLOPE = 0.1
MPD_PERIODS = (2, 3, 5, 7, 11)
MRD_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))


@dataclass
class DiscriminatorOutput:
    scores: List[torch.Tensor]
    features: List[List[torch.Tensor]]

    def __add__(self, other: "DiscriminatorOutput") -> "DiscriminatorOutput":
        return DiscriminatorOutput(self.scores + other.scores, self.features + other.features)


def _ch(n: int, width: float) -> int:
    return max(int(round(n * width)), 1)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 1:
        return x[None, None]
    if x.dim() == 2:
        return x[:, None]
    return x


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, width: float = 1.0):
        super().__init__()
        self.period = period
        chans = [1] + [_ch(c, width) for c in (32, 128, 512, 1024)]
        layers = [
            weight_norm(nn.Conv2d(cin, cout, (5, 1), (3, 1), padding=(2, 0)))
            for cin, cout in zip(chans[:-1], chans[1:])
        ]
        layers.append(weight_norm(nn.Conv2d(chans[-1], chans[-1], (5, 1), 1, padding=(2, 0))))
        self.convs = nn.ModuleList(layers)
        self.post = weight_norm(nn.Conv2d(chans[-1], 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):  # (B, 1, N)
        b, c, n = x.shape
        if n % self.period:
            pad = self.period - n % self.period
            x = F.pad(x, (0, pad), mode="reflect" if pad < n else "constant")
            n = x.shape[-1]
        x = x.view(b, c, n // self.period, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.flatten(1), feats


class ResolutionDiscriminator(nn.Module):
    """2-D convolutions over a linear magnitude spectrogram at one STFT resolution."""

    def __init__(self, n_fft: int, hop: int, width: float = 1.0):
        super().__init__()
        self.n_fft, self.hop = n_fft, hop
        c = _ch(32, width)
        self.convs = nn.ModuleList(
            [
                weight_norm(nn.Conv2d(1, c, (3, 9), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 3), padding=(1, 1))),
            ]
        )
        self.post = weight_norm(nn.Conv2d(c, 1, (3, 3), padding=(1, 1)))

    def spectrogram(self, x):  # (B, 1, N) -> (B, 1, T, F)
        pad = (self.n_fft - self.hop) // 2
        x = F.pad(x, (pad, pad), mode="reflect")
        spec = torch.stft(
            x.squeeze(1),
            self.n_fft,
            self.hop,
            window=torch.hann_window(self.n_fft, dtype=x.dtype, device=x.device),
            center=False,
            return_complex=True,
        )
        mag = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-9)
        return mag.transpose(1, 2)[:, None]

    def forward(self, x):
        y = self.spectrogram(x)
        feats = []
        for conv in self.convs:
            y = F.leaky_relu(conv(y), LRELU_SLOPE)
            feats.append(y)
        y = self.post(y)
        feats.append(y)
        return y.flatten(1), feats


class BandDiscriminator(nn.Module):
    """MelGAN-style strided/grouped 1-D convolution stack applied to one frequency band."""

    def __init__(self, width: float = 1.0):
        super().__init__()
        c1, c2, c3 = _ch(16, width), _ch(64, width), _ch(256, width)
        g2, g3 = _groups(c1, c2, 4), _groups(c2, c3, 16)
        self.convs = nn.ModuleList(
            [
                weight_norm(nn.Conv1d(1, c1, 15, padding=7)),
                weight_norm(nn.Conv1d(c1, c2, 41, stride=4, groups=g2, padding=20)),
                weight_norm(nn.Conv1d(c2, c3, 41, stride=4, groups=g3, padding=20)),
                weight_norm(nn.Conv1d(c3, c3, 5, padding=2)),
            ]
        )
        self.post = weight_norm(nn.Conv1d(c3, 1, 3, padding=1))

    def forward(self, x):  # (B, 1, N)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.post(x)
        feats.append(x)
        return x.flatten(1), feats


def _groups(cin: int, cout: int, wanted: int) -> int:
    g = wanted
    while g > 1 and (cin % g or cout % g):
        g //= 2
    return g


class _MultiDiscriminator(nn.Module):
    min_length = 1

    def _check(self, x):
        x = _as_batch(x)
        if x.shape[-1] < self.min_length:
            raise InvalidArgumentError(
                f"{type(self).__name__} needs at least {self.min_length} samples, got {x.shape[-1]}"
            )
        return x


class MultiPeriodDiscriminator(_MultiDiscriminator):
    def __init__(self, periods: Sequence[int] = MPD_PERIODS, width: float = 1.0):
        super().__init__()
        self.discriminators = nn.ModuleList(PeriodDiscriminator(p, width) for p in periods)
        # five stride-3 layers need a few rows per period column
        self.min_length = 2 * max(periods)

    def forward(self, x) -> DiscriminatorOutput:
        x = self._check(x)
        out = DiscriminatorOutput([], [])
        for d in self.discriminators:
            s, f = d(x)
            out.scores.append(s)
            out.features.append(f)
        return out


class MultiResolutionDiscriminator(_MultiDiscriminator):
    def __init__(self, resolutions: Sequence[Tuple[int, int]] = MRD_RESOLUTIONS, width: float = 1.0):
        super().__init__()
        self.discriminators = nn.ModuleList(ResolutionDiscriminator(n, h, width) for n, h in resolutions)
        self.min_length = max(n for n, _ in resolutions)

    def forward(self, x) -> DiscriminatorOutput:
        x = self._check(x)
        out = DiscriminatorOutput([], [])
        for d in self.discriminators:
            s, f = d(x)
            out.scores.append(s)
            out.features.append(f)
        return out


class MultiBandDiscriminator(_MultiDiscriminator):
    def __init__(self, n_bands: int = 3, width: float = 1.0):
        super().__init__()
        self.n_bands = n_bands
        self.discriminators = nn.ModuleList(BandDiscriminator(width) for _ in range(n_bands))
        self.min_length = 64

    def forward(self, x) -> DiscriminatorOutput:
        x = self._check(x)
        bands = band_split_tensor(x[:, 0], self.n_bands)  # (B, n_bands, N)
        out = DiscriminatorOutput([], [])
        for i, d in enumerate(self.discriminators):
            s, f = d(bands[:, i : i + 1])
            out.scores.append(s)
            out.features.append(f)
        return out


def mpd_forward(model: MultiPeriodDiscriminator, wav) -> DiscriminatorOutput:
    return model(wav)


def mrd_forward(model: MultiResolutionDiscriminator, wav) -> DiscriminatorOutput:
    return model(wav)


def mbd_forward(model: MultiBandDiscriminator, wav) -> DiscriminatorOutput:
    return model(wav)


class DiscriminatorSet(nn.Module):
    """Concatenates the outputs of several multi-discriminators."""

    def __init__(self, members: Sequence[nn.Module]):
        super().__init__()
        self.members = nn.ModuleList(members)

    @property
    def min_length(self) -> int:
        return max(m.min_length for m in self.members)

    def forward(self, x) -> DiscriminatorOutput:
        out = DiscriminatorOutput([], [])
        for m in self.members:
            out = out + m(x)
        return out


def build_discriminators(stage: str, width: float = 1.0, resolutions=MRD_RESOLUTIONS) -> DiscriminatorSet:
    """MPD + MRD for the filling stage, MRD + MBD for restoration."""
    if stage == "fill":
        return DiscriminatorSet([MultiPeriodDiscriminator(width=width), MultiResolutionDiscriminator(resolutions, width)])
    if stage == "res":
        return DiscriminatorSet([MultiResolutionDiscriminator(resolutions, width), MultiBandDiscriminator(width=width)])
    raise InvalidArgumentError(f"stage {stage!r} has no adversarial training")
