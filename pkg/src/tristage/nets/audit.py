"""Parameter and multiply-accumulate accounting for the stage networks.

Two independent routes are provided: closed-form counts derived from a
``GridNetConfig`` and measurements taken from an actual forward pass. The
tests cross-check one against the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import torch
import torch.nn as nn
from torch.utils.flop_counter import FlopCounterMode

from ..dsp import DEFAULT_STFT, FULLBAND_RATE, NUM_SUBBANDS, StftConfig, subband_edges
from .gridnet import PRESET_L, PRESET_S, GridNetConfig


def _padded_len(n: int, kernel: int, stride: int) -> int:
    olp = kernel - stride
    return math.ceil((n + 2 * olp - kernel) / stride) * stride + kernel


def _n_units(n: int, kernel: int, stride: int) -> int:
    return (_padded_len(n, kernel, stride) - kernel) // stride + 1


def block_param_count(cfg: GridNetConfig) -> int:
    d, i, h, heads, e = cfg.emb_dim, cfg.unfold_kernel, cfg.lstm_hidden, cfg.attn_heads, cfg.attn_channels
    lstm = 2 * (4 * h * (d * i + h) + 8 * h)  # two directions, two bias vectors each
    path = 2 * d + lstm + 2 * h * d * i + d
    qk = d * heads * e + heads * e + heads + 2 * heads * e
    v = d * d + d + heads + 2 * d
    proj = d * d + d + 1 + 2 * d
    return 2 * path + 2 * qk + v + proj


def gridnet_param_count(cfg: GridNetConfig, in_channels: int = 2, out_channels: int = 2) -> int:
    d = cfg.emb_dim
    conv_in = in_channels * d * 9 + d + 2 * d
    conv_out = d * out_channels * 9 + out_channels
    return conv_in + cfg.n_blocks * block_param_count(cfg) + conv_out


def cws_param_count(cfg: GridNetConfig) -> int:
    return gridnet_param_count(cfg, 2 * NUM_SUBBANDS, 2 * NUM_SUBBANDS)


def gridnet_macs(cfg: GridNetConfig, n_frames: int, n_freqs: int, in_channels: int = 2, out_channels: int = 2) -> int:
    """Multiply-accumulates of one forward pass over a (T, F) grid.

    Counts convolutions, recurrent cells and attention products; norms and
    pointwise activations are ignored.
    """
    d, i, j, h = cfg.emb_dim, cfg.unfold_kernel, cfg.unfold_stride, cfg.lstm_hidden
    heads, e = cfg.attn_heads, cfg.attn_channels
    t, f = n_frames, n_freqs
    tp, fp = _padded_len(t, i, j), _padded_len(f, i, j)
    lstm_step = 2 * 4 * h * (d * i + h)
    deconv_step = 2 * h * d * i
    intra = tp * _n_units(f, i, j) * (lstm_step + deconv_step)
    inter = fp * _n_units(t, i, j) * (lstm_step + deconv_step)
    attn = t * f * d * (2 * heads * e + d) + t * t * f * (heads * e + d) + t * f * d * d
    block = intra + inter + attn
    conv_in = in_channels * d * 9 * t * f
    conv_out = d * out_channels * 9 * t * f
    return conv_in + cfg.n_blocks * block + conv_out


def stage_macs_per_second(kind: str, cfg: GridNetConfig, fs: int, stft_cfg: StftConfig = DEFAULT_STFT) -> int:
    """MACs for one second of audio; the restoration stage always runs at 48 kHz."""
    if kind == "res":
        fs = FULLBAND_RATE
    t = stft_cfg.n_frames(fs, fs)
    n_freqs = stft_cfg.n_freqs(fs)
    if kind == "res":
        edges = subband_edges(n_freqs)
        width = max(b - a for a, b in zip(edges[:-1], edges[1:]))
        return gridnet_macs(cfg, t, width, 2 * NUM_SUBBANDS, 2 * NUM_SUBBANDS)
    return gridnet_macs(cfg, t, n_freqs)


# MACs measured from a forward pass ------------------------------------------------


def _lstm_macs(module: nn.LSTM, inp: torch.Tensor) -> int:
    if module.batch_first:
        n, length, d_in = inp.shape
    else:
        length, n, d_in = inp.shape
    h = module.hidden_size
    dirs = 2 if module.bidirectional else 1
    if module.num_layers != 1:
        raise NotImplementedError("only single-layer LSTMs are counted")
    return n * length * dirs * 4 * h * (d_in + h)


def measure_macs(model: nn.Module, *inputs) -> int:
    """Forward ``model`` once and count MACs of convolutions, matmuls and LSTMs.

    The torch flop counter covers convolution and matrix products but not
    recurrent kernels, so LSTMs are counted with forward hooks from their
    actual input shapes.
    """
    lstm_total = [0]

    def hook(mod, args, _out):
        lstm_total[0] += _lstm_macs(mod, args[0])

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, nn.LSTM)]
    try:
        counter = FlopCounterMode(display=False)
        with torch.no_grad(), counter:
            model(*inputs)
    finally:
        for hd in handles:
            hd.remove()
    return counter.get_total_flops() // 2 + lstm_total[0]


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# Report ------------------------------------------------------------------------------


@dataclass
class AuditReport:
    params: Dict[str, int]
    macs_per_second: Dict[int, int]
    stage_macs: Dict[int, Dict[str, int]] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    def to_dict(self) -> dict:
        return {
            "params": dict(self.params),
            "total_params": self.total_params,
            "macs_per_second": {str(k): v for k, v in self.macs_per_second.items()},
            "stage_macs": {str(k): dict(v) for k, v in self.stage_macs.items()},
        }

    def to_text(self) -> str:
        lines = ["network            parameters"]
        for name, n in self.params.items():
            lines.append(f"{name:<18} {n:>12,d}  ({n / 1e6:.3f} M)")
        lines.append(f"{'total':<18} {self.total_params:>12,d}  ({self.total_params / 1e6:.2f} M)")
        lines.append("")
        lines.append("input rate   GMACs per second (fill + sep + res)")
        for fs, macs in self.macs_per_second.items():
            parts = " + ".join(f"{v / 1e9:.1f}" for v in self.stage_macs.get(fs, {}).values())
            lines.append(f"{fs:>7d} Hz   {macs / 1e9:8.1f}   [{parts}]")
        return "\n".join(lines)


def audit(
    fill_cfg: GridNetConfig = PRESET_S,
    sep_cfg: GridNetConfig = PRESET_L,
    res_cfg: GridNetConfig = PRESET_S,
    include_finetuned_res: bool = True,
    rates=(16000, 48000),
    stft_cfg: StftConfig = DEFAULT_STFT,
) -> AuditReport:
    """Analytic audit of the three-stage bundle.

    The fine-tuned restoration network is a second set of weights with the
    same shape. It counts towards storage but only one of the two runs per
    utterance, so it adds nothing to the per-second compute.
    """
    params = {
        "fill": gridnet_param_count(fill_cfg),
        "sep": gridnet_param_count(sep_cfg),
        "res": cws_param_count(res_cfg),
    }
    if include_finetuned_res:
        params["res_finetuned"] = cws_param_count(res_cfg)
    stage_macs = {}
    for fs in rates:
        stage_macs[fs] = {
            "fill": stage_macs_per_second("fill", fill_cfg, fs, stft_cfg),
            "sep": stage_macs_per_second("sep", sep_cfg, fs, stft_cfg),
            "res": stage_macs_per_second("res", res_cfg, fs, stft_cfg),
        }
    return AuditReport(params, {fs: sum(v.values()) for fs, v in stage_macs.items()}, stage_macs)
