"""Synthetic speech-like clean signals for tests, toy training and demo corpora.

Voiced syllables are harmonic series with a drifting pitch, shaped by three
formant resonances; unvoiced syllables are high-passed noise bursts. The
mix has a speech-like long-term spectrum that still reaches the Nyquist
frequency, so band limitation is visible in it.
"""

from __future__ import annotations

import numpy as np
from scipy import signal as sps

from .dsp import Waveform, check_rate


def _resonate(x: np.ndarray, fs: int, center: float, bw: float) -> np.ndarray:
    center = min(center, 0.45 * fs)
    b, a = sps.iirpeak(center, center / bw, fs=fs)
    return sps.lfilter(b, a, x)


def _voiced(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    f0 = rng.uniform(90, 230) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    src = np.zeros(n)
    k_max = int(0.45 * fs / f0.max())
    for k in range(1, k_max + 1):
        src += np.sin(k * phase) / k**0.7
    out = 0.3 * src
    for lo, hi in ((300, 900), (900, 2500), (2500, 3500)):
        out += _resonate(src, fs, rng.uniform(lo, hi), rng.uniform(80, 200))
    # breathiness: weak aspiration noise above 1 kHz
    sos = sps.butter(2, 1000, "highpass", fs=fs, output="sos")
    out += 0.15 * np.std(out) * sps.sosfilt(sos, rng.standard_normal(n))
    return out


def _unvoiced(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    sos = sps.butter(2, rng.uniform(1500, 3000), "highpass", fs=fs, output="sos")
    return 2.0 * sps.sosfilt(sos, rng.standard_normal(n))


def synth_speech(duration_s: float, fs: int, rng: np.random.Generator, peak: float = 0.5, floor_db: float = -60.0) -> Waveform:
    """Sequence of syllables (100-300 ms) and short pauses, peak-normalised.

    A white noise floor ``floor_db`` below the peak stands in for the
    recording noise of real corpora, so pauses are never digitally silent.
    """
    fs = check_rate(fs)
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.05) * fs)
    while pos < n:
        seg = int(rng.uniform(0.1, 0.3) * fs)
        seg = min(seg, n - pos)
        if seg < 16:
            break
        burst = _voiced(seg, fs, rng) if rng.random() < 0.75 else _unvoiced(seg, fs, rng)
        env = np.sin(np.pi * np.arange(seg) / seg) ** 2
        out[pos : pos + seg] += burst * env * rng.uniform(0.5, 1.0)
        pos += seg + int(rng.uniform(0.0, 0.08) * fs)
    m = np.max(np.abs(out))
    if m > 0:
        out *= peak / m
    out += peak * 10.0 ** (floor_db / 20.0) * rng.standard_normal(n)
    return Waveform(out, fs)


def synth_corpus(n_utts: int, duration_s: float, fs: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [synth_speech(duration_s, fs, rng) for _ in range(n_utts)]
