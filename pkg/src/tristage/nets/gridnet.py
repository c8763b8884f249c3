"""TF-GridNet and its channel-wise-subband variant.

The blocks follow the original TF-GridNet design (intra-frame BLSTM over
unfolded frequency, sub-band BLSTM over time, cross-frame multi-head
attention), in the sampling-frequency-independent form: no parameter depends
on the number of frequency bins, so one set of weights runs at any rate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dsp import (
    DEFAULT_STFT,
    FULLBAND_RATE,
    NUM_SUBBANDS,
    StftConfig,
    cws_merge_tensor,
    cws_split_tensor,
    istft_tensor,
    stft_tensor,
)
from ..errors import InvalidArgumentError, ShapeMismatchError, UnsupportedRateError


@dataclass(frozen=True)
class GridNetConfig:
    emb_dim: int = 48
    n_blocks: int = 5
    unfold_kernel: int = 4
    unfold_stride: int = 1
    lstm_hidden: int = 100
    attn_channels: int = 2
    attn_heads: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        ints = (self.emb_dim, self.n_blocks, self.unfold_kernel, self.unfold_stride,
                self.lstm_hidden, self.attn_channels, self.attn_heads)
        if any(int(v) != v or v <= 0 for v in ints):
            raise InvalidArgumentError(f"all GridNet sizes must be positive integers: {self}")
        if self.unfold_kernel < self.unfold_stride:
            raise InvalidArgumentError("unfold kernel must be >= unfold stride")
        if self.emb_dim % self.attn_heads:
            raise InvalidArgumentError("emb_dim must be divisible by attn_heads")

    def doubled(self) -> "GridNetConfig":
        """Every size doubled except the unfold kernel and stride."""
        return GridNetConfig(
            emb_dim=2 * self.emb_dim,
            n_blocks=2 * self.n_blocks,
            unfold_kernel=self.unfold_kernel,
            unfold_stride=self.unfold_stride,
            lstm_hidden=2 * self.lstm_hidden,
            attn_channels=2 * self.attn_channels,
            attn_heads=2 * self.attn_heads,
            eps=self.eps,
        )

    def to_dict(self) -> dict:
        return asdict(self)


PRESET_S = GridNetConfig()
PRESET_L = PRESET_S.doubled()
PRESETS = {"S": PRESET_S, "L": PRESET_L}


class ChannelNorm(nn.Module):
    """Layer norm over the channel axis of a (B, C, T, F) tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.gamma + self.beta


class HeadNorm(nn.Module):
    """Per-head PReLU followed by layer norm over each head's channels."""

    def __init__(self, heads: int, channels: int, eps: float = 1e-5):
        super().__init__()
        self.heads, self.channels = heads, channels
        self.act = nn.PReLU(num_parameters=heads, init=0.25)
        self.gamma = nn.Parameter(torch.ones(1, heads, channels, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, heads, channels, 1, 1))
        self.eps = eps

    def forward(self, x):  # (B, heads*channels, T, F) -> (B, heads, channels, T, F)
        b, _, t, f = x.shape
        x = self.act(x.reshape(b, self.heads, self.channels, t, f))
        mu = x.mean(dim=2, keepdim=True)
        var = x.var(dim=2, unbiased=False, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.gamma + self.beta


class _UnfoldedBLSTM(nn.Module):
    """Norm -> unfold(kernel, stride) -> BLSTM -> transposed conv, with a residual."""

    def __init__(self, dim: int, kernel: int, stride: int, hidden: int, eps: float):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.norm = nn.LayerNorm(dim, eps=eps)
        self.rnn = nn.LSTM(dim * kernel, hidden, 1, batch_first=True, bidirectional=True)
        self.proj = nn.ConvTranspose1d(2 * hidden, dim, kernel, stride=stride)

    def forward(self, x):  # (N, L, C) -> (N, L, C); L already padded to fit the unfold
        n, length, c = x.shape
        y = self.norm(x).transpose(1, 2)  # (N, C, L)
        y = F.unfold(y[..., None], (self.kernel, 1), stride=(self.stride, 1))  # (N, C*k, L')
        y, _ = self.rnn(y.transpose(1, 2))
        y = self.proj(y.transpose(1, 2))  # (N, C, L)
        return y.transpose(1, 2) + x


class GridNetBlock(nn.Module):
    def __init__(self, cfg: GridNetConfig):
        super().__init__()
        d, heads, e = cfg.emb_dim, cfg.attn_heads, cfg.attn_channels
        self.cfg = cfg
        self.intra = _UnfoldedBLSTM(d, cfg.unfold_kernel, cfg.unfold_stride, cfg.lstm_hidden, cfg.eps)
        self.inter = _UnfoldedBLSTM(d, cfg.unfold_kernel, cfg.unfold_stride, cfg.lstm_hidden, cfg.eps)
        self.q = nn.Conv2d(d, heads * e, 1)
        self.q_norm = HeadNorm(heads, e, cfg.eps)
        self.k = nn.Conv2d(d, heads * e, 1)
        self.k_norm = HeadNorm(heads, e, cfg.eps)
        self.v = nn.Conv2d(d, d, 1)
        self.v_norm = HeadNorm(heads, d // heads, cfg.eps)
        self.attn_proj = nn.Sequential(nn.Conv2d(d, d, 1), nn.PReLU(), ChannelNorm(d, cfg.eps))

    @staticmethod
    def padded_len(n: int, kernel: int, stride: int) -> int:
        olp = kernel - stride
        return math.ceil((n + 2 * olp - kernel) / stride) * stride + kernel

    def forward(self, x):  # (B, C, T, F)
        b, c, t0, f0 = x.shape
        k, s = self.cfg.unfold_kernel, self.cfg.unfold_stride
        olp = k - s
        t, f = self.padded_len(t0, k, s), self.padded_len(f0, k, s)
        y = F.pad(x, (olp, f - f0 - olp, olp, t - t0 - olp))  # (B, C, T', F')

        # intra-frame path: sequences run over frequency
        y = y.permute(0, 2, 3, 1).reshape(b * t, f, c)
        y = self.intra(y).reshape(b, t, f, c)
        # sub-band temporal path: sequences run over time
        y = y.transpose(1, 2).reshape(b * f, t, c)
        y = self.inter(y).reshape(b, f, t, c)
        y = y.permute(0, 3, 2, 1)[..., olp : olp + t0, olp : olp + f0]  # (B, C, T, F)

        # cross-frame self-attention
        heads = self.cfg.attn_heads
        q = self.q_norm(self.q(y))  # (B, H, E, T, F)
        kk = self.k_norm(self.k(y))
        v = self.v_norm(self.v(y))  # (B, H, C/H, T, F)
        q = q.transpose(2, 3).reshape(b * heads, t0, -1)  # (BH, T, E*F)
        kk = kk.transpose(2, 3).reshape(b * heads, t0, -1)
        v_shape = v.shape
        v = v.transpose(2, 3).reshape(b * heads, t0, -1)  # (BH, T, C/H*F)
        attn = torch.softmax(torch.matmul(q, kk.transpose(1, 2)) / math.sqrt(q.shape[-1]), dim=-1)
        v = torch.matmul(attn, v)
        v = v.reshape(b, heads, t0, v_shape[2], f0).transpose(2, 3).reshape(b, c, t0, f0)
        return self.attn_proj(v) + y


class TFGridNet(nn.Module):
    """(B, in_channels, T, F) real -> (B, out_channels, T, F) real, for any F."""

    def __init__(self, cfg: GridNetConfig, in_channels: int = 2, out_channels: int = 2, zero_init_output: bool = False):
        super().__init__()
        self.cfg = cfg
        self.in_channels, self.out_channels = in_channels, out_channels
        d = cfg.emb_dim
        self.conv_in = nn.Sequential(nn.Conv2d(in_channels, d, 3, padding=1), nn.GroupNorm(1, d, eps=cfg.eps))
        self.blocks = nn.ModuleList(GridNetBlock(cfg) for _ in range(cfg.n_blocks))
        self.conv_out = nn.ConvTranspose2d(d, out_channels, 3, padding=1)
        if zero_init_output:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        y = self.conv_in(x)
        for blk in self.blocks:
            y = blk(y)
        return self.conv_out(y)


def build_tfgridnet(cfg: GridNetConfig, in_channels: int = 2, out_channels: int = 2, zero_init_output: bool = False) -> TFGridNet:
    return TFGridNet(cfg, in_channels, out_channels, zero_init_output)


class CWSGridNet(nn.Module):
    """CWS split -> TF-GridNet on 3x(re, im) channels -> CWS merge. Complex (B, T, F) in and out."""

    def __init__(self, cfg: GridNetConfig, zero_init_output: bool = False):
        super().__init__()
        self.net = TFGridNet(cfg, 2 * NUM_SUBBANDS, 2 * NUM_SUBBANDS, zero_init_output)

    def forward(self, spec):
        chans = cws_split_tensor(spec)
        return cws_merge_tensor(self.net(chans), spec.shape[-1])


def build_cws_tfgridnet(cfg: GridNetConfig, zero_init_output: bool = False) -> CWSGridNet:
    return CWSGridNet(cfg, zero_init_output)


def _to_channels(spec):  # complex (B, T, F) -> real (B, 2, T, F)
    return torch.stack((spec.real, spec.imag), dim=1)


def _to_complex(chans):
    return torch.complex(chans[:, 0], chans[:, 1])


STAGE_KINDS = ("fill", "sep", "res")


class StageModel(nn.Module):
    """Waveform-in, waveform-out wrapper: STFT -> network -> iSTFT (+ stage skip).

    ``fill`` and ``res`` add their input back (residual / skip connection) and
    start from a zero-initialised output layer, so an untrained stage is an
    identity. ``sep`` regresses the target waveform directly. ``res`` runs the
    CWS variant and accepts 48 kHz input only.
    """

    def __init__(self, kind: str, cfg: GridNetConfig, stft_cfg: StftConfig = DEFAULT_STFT, zero_init_output=None):
        super().__init__()
        if kind not in STAGE_KINDS:
            raise InvalidArgumentError(f"unknown stage {kind!r}")
        self.kind, self.cfg, self.stft_cfg = kind, cfg, stft_cfg
        zero = kind in ("fill", "res") if zero_init_output is None else zero_init_output
        if kind == "res":
            self.net = build_cws_tfgridnet(cfg, zero)
        else:
            self.net = build_tfgridnet(cfg, 2, 2, zero)

    @property
    def residual(self) -> bool:
        return self.kind in ("fill", "res")

    def forward(self, wav: torch.Tensor, fs: int) -> torch.Tensor:
        if self.kind == "res" and fs != FULLBAND_RATE:
            raise UnsupportedRateError(f"restoration network runs at {FULLBAND_RATE} Hz only, got {fs}")
        squeeze = wav.dim() == 1
        x = wav[None] if squeeze else wav
        n = x.shape[-1]
        n_fft, hop = self.stft_cfg.fft_size(fs), self.stft_cfg.hop_size(fs)
        scale = x.std(dim=-1, keepdim=True).clamp_min(1e-8)
        spec = stft_tensor(x / scale, n_fft, hop, self.stft_cfg.window)
        if self.kind == "res":
            out = self.net(spec)
        else:
            out = _to_complex(self.net(_to_channels(spec)))
        y = istft_tensor(out, n_fft, hop, n, self.stft_cfg.window) * scale
        if self.residual:
            y = y + x
        return y[0] if squeeze else y
