"""Independent loop-based reference implementations used as test oracles.

Nothing here imports the package's kernels; everything is written out with
plain Python loops and direct DFT sums so it can check the vectorised code.
"""

import cmath
import math

import numpy as np


def direct_dft(x):
    n = len(x)
    return np.array([sum(x[m] * cmath.exp(-2j * math.pi * k * m / n) for m in range(n)) for k in range(n // 2 + 1)])


def hann_periodic(n):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])


def reflect_index(i, n):
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def stft_loop(x, n_fft, hop):
    """Centered, reflect-padded Hann STFT with ceil(N / hop) frames, direct DFT per frame."""
    n = len(x)
    n_frames = -(-n // hop)
    w = hann_periodic(n_fft)
    out = np.zeros((n_frames, n_fft // 2 + 1), dtype=complex)
    for t in range(n_frames):
        frame = [x[reflect_index(t * hop + j - n_fft // 2, n)] * w[j] for j in range(n_fft)]
        out[t] = direct_dft(frame)
    return out


def sdr_loop(s, s_hat, eps=1e-8):
    num = sum(v * v for v in s)
    den = sum((a - b) ** 2 for a, b in zip(s, s_hat))
    return -math.log10(num / (den + eps))


def _mag(z, eps=1e-8):
    return math.sqrt(max(z.real**2 + z.imag**2, eps**2))


def lsd_loop(S, S_hat, eps=1e-8):
    T, F = S.shape
    total = 0.0
    for t in range(T):
        acc = 0.0
        for f in range(F):
            acc += math.log10(_mag(S[t, f], eps) / _mag(S_hat[t, f], eps)) ** 2
        total += math.sqrt(acc / F)
    return total / T


def mag_loop(S, S_hat, eps=1e-8):
    T, F = S.shape
    return sum((_mag(S[t, f], eps) ** 0.3 - _mag(S_hat[t, f], eps) ** 0.3) ** 2 for t in range(T) for f in range(F)) / (T * F)


def real_loop(S, S_hat, eps=1e-8):
    T, F = S.shape
    acc = 0.0
    for t in range(T):
        for f in range(F):
            a = S[t, f].real / _mag(S[t, f], eps) ** 0.7
            b = S_hat[t, f].real / _mag(S_hat[t, f], eps) ** 0.7
            acc += (a - b) ** 2
    return acc / (T * F)


def imag_loop(S, S_hat, eps=1e-8):
    T, F = S.shape
    acc = 0.0
    for t in range(T):
        for f in range(F):
            a = S[t, f].imag / _mag(S[t, f], eps) ** 0.7
            b = S_hat[t, f].imag / _mag(S_hat[t, f], eps) ** 0.7
            acc += (a - b) ** 2
    return acc / (T * F)


def mel_filterbank_loop(n_freqs, fs, n_mels):
    """HTK mel triangles, peaks equally spaced in mel between 0 and fs/2."""

    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    top = to_mel(fs / 2.0)
    pts = [to_hz(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_freqs, n_mels))
    for k in range(n_freqs):
        f = (fs / 2.0) * k / (n_freqs - 1)
        for m in range(n_mels):
            lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
            if lo <= f <= mid:
                fb[k, m] = (f - lo) / (mid - lo)
            elif mid < f <= hi:
                fb[k, m] = (hi - f) / (hi - mid)
    return fb


def mfcc_loop(x, fs, n_fft, hop, n_mels, n_mfcc, floor=1e-8):
    S = stft_loop(x, n_fft, hop)
    fb = mel_filterbank_loop(S.shape[1], fs, n_mels)
    out = np.zeros((S.shape[0], n_mfcc))
    for t in range(S.shape[0]):
        logmel = []
        for m in range(n_mels):
            e = sum((abs(S[t, k]) ** 2) * fb[k, m] for k in range(S.shape[1]))
            logmel.append(math.log(e + floor))
        for c in range(n_mfcc):
            scale = math.sqrt(1.0 / n_mels) if c == 0 else math.sqrt(2.0 / n_mels)
            out[t, c] = scale * sum(logmel[m] * math.cos(math.pi / n_mels * (m + 0.5) * c) for m in range(n_mels))
    return out


def mcd_mse_loop(s, s_hat, fs, n_fft, hop, n_mels, n_mfcc):
    a = mfcc_loop(s, fs, n_fft, hop, n_mels, n_mfcc)
    b = mfcc_loop(s_hat, fs, n_fft, hop, n_mels, n_mfcc)
    return sum((a[t, c] - b[t, c]) ** 2 for t in range(a.shape[0]) for c in range(a.shape[1])) / a.size


def wavlm_distill_loop(f, f_hat, eps=1e-8):
    T, D = f.shape
    total = 0.0
    for t in range(T):
        for d in range(D):
            dot = sum(f[i, d] * f_hat[i, d] for i in range(T))
            na = max(math.sqrt(sum(f[i, d] ** 2 for i in range(T))), eps)
            nb = max(math.sqrt(sum(f_hat[i, d] ** 2 for i in range(T))), eps)
            cos = dot / (na * nb)
            total += math.log10(1.0 / (1.0 + math.exp(-cos)))
    return -total / (T * D)


def naive_convolve(x, h):
    out = np.zeros(len(x) + len(h) - 1)
    for i in range(len(x)):
        for j in range(len(h)):
            out[i + j] += x[i] * h[j]
    return out


def snr_db(clean, noisy):
    noise = [b - a for a, b in zip(clean, noisy)]
    return 10.0 * math.log10(sum(v * v for v in clean) / sum(v * v for v in noise))
