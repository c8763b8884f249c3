import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import direct_dft, stft_loop
from tristage.dsp import (
    DEFAULT_STFT,
    SUPPORTED_RATES,
    ComplexSpectrogram,
    StftConfig,
    SubbandStack,
    Waveform,
    band_energy_fraction,
    band_split_tensor,
    cws_merge,
    cws_merge_tensor,
    cws_split,
    cws_split_tensor,
    istft,
    resample,
    stft,
    stft_tensor,
    subband_edges,
)
from tristage.errors import InvalidArgumentError, ShapeMismatchError, UnsupportedRateError


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestWaveform:
    def test_rejects_nan(self):
        with pytest.raises(InvalidArgumentError):
            Waveform(np.array([0.0, np.nan]), 16000)

    def test_rejects_unsupported_rate(self):
        with pytest.raises(UnsupportedRateError):
            Waveform(np.zeros(4), 11025)

    def test_rejects_multichannel(self):
        with pytest.raises(ShapeMismatchError):
            Waveform(np.zeros((2, 4)), 16000)

    def test_duration(self):
        assert Waveform(np.zeros(22050), 22050).duration == 1.0


class TestStftConfig:
    @pytest.mark.parametrize("fs", SUPPORTED_RATES)
    def test_sizes(self, fs):
        cfg = DEFAULT_STFT
        assert cfg.fft_size(fs) == round(fs * 0.032)
        assert cfg.hop_size(fs) == cfg.fft_size(fs) // 2
        assert cfg.n_freqs(fs) == cfg.fft_size(fs) // 2 + 1

    def test_hop_must_be_half_window(self):
        with pytest.raises(InvalidArgumentError):
            StftConfig(win_len_ms=32.0, hop_ms=8.0)


class TestStft:
    def test_zero_signal(self):
        spec = stft(Waveform(np.zeros(16000), 16000))
        assert np.all(spec.data == 0)
        assert spec.shape == (math.ceil(16000 / 256), 257)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            stft(Waveform(np.zeros(0), 16000))

    def test_bin_centred_cosine_matches_direct_dft(self):
        # one rectangular frame of a cosine at bin k
        n, k = 256, 19
        x = np.cos(2 * np.pi * k * np.arange(n) / n)
        frame = torch.from_numpy(x)
        ours = torch.fft.rfft(frame * torch.ones(n)).numpy()
        ref = direct_dft(x)
        np.testing.assert_allclose(ours, ref, atol=1e-9)
        assert np.argmax(np.abs(ours)) == k
        assert abs(ours[k]) == pytest.approx(n / 2)

    def test_matches_loop_stft(self, rng):
        x = rng.standard_normal(50)
        ours = stft_tensor(torch.from_numpy(x), 16, 8, "hann").numpy()
        np.testing.assert_allclose(ours, stft_loop(x, 16, 8), rtol=1e-10, atol=1e-10)

    def test_linearity(self, rng):
        x, y = rng.standard_normal(8000), rng.standard_normal(8000)
        a, b = 0.7, -2.3
        lhs = stft(Waveform(a * x + b * y, 16000)).data
        rhs = a * stft(Waveform(x, 16000)).data + b * stft(Waveform(y, 16000)).data
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    @pytest.mark.parametrize("fs", SUPPORTED_RATES)
    def test_round_trip_all_rates(self, fs, rng):
        x = rng.standard_normal(2 * fs)
        y = istft(stft(Waveform(x, fs)), out_len=len(x)).samples
        assert _rel(y, x) < 1e-6

    @given(n=st.integers(min_value=600, max_value=3000), seed=st.integers(0, 2**31 - 1))
    def test_round_trip_any_length(self, n, seed):
        x = np.random.default_rng(seed).standard_normal(n)
        y = istft(stft(Waveform(x, 8000)), out_len=n).samples
        assert _rel(y, x) < 1e-6

    def test_istft_stft_fixed_point(self, rng):
        spec = stft(Waveform(rng.standard_normal(16000), 16000))
        again = stft(istft(spec, out_len=16000))
        assert np.linalg.norm(again.data - spec.data) / np.linalg.norm(spec.data) < 1e-6

    def test_istft_zero(self):
        spec = ComplexSpectrogram(np.zeros((10, 129)), DEFAULT_STFT, 8000)
        assert np.all(istft(spec, out_len=1000).samples == 0)

    def test_istft_length_contract(self, rng):
        spec = stft(Waveform(rng.standard_normal(1000), 16000))
        assert len(istft(spec, out_len=777)) == 777
        assert len(istft(spec, out_len=5000)) == 5000

    def test_istft_inconsistent_bins(self):
        with pytest.raises(ShapeMismatchError):
            ComplexSpectrogram(np.zeros((4, 100)), DEFAULT_STFT, 16000)

    def test_istft_config_mismatch(self):
        spec = ComplexSpectrogram(np.zeros((4, 257)), DEFAULT_STFT, 16000)
        with pytest.raises(ShapeMismatchError):
            istft(spec, StftConfig(window="boxcar"))


def _bandlimited(n, fs, f_max, rng):
    """Sum of random sinusoids below f_max under a Hann taper."""
    t = np.arange(n) / fs
    x = sum(rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * rng.uniform(50, f_max) * t + rng.uniform(0, 6.3)) for _ in range(20))
    return x * np.hanning(n)


class TestResample:
    @pytest.mark.parametrize("fs", SUPPORTED_RATES)
    def test_identity(self, fs, rng):
        x = Waveform(rng.standard_normal(1000), fs)
        assert np.array_equal(resample(x, fs).samples, x.samples)

    @pytest.mark.parametrize("src,dst", [(48000, 16000), (44100, 48000), (22050, 48000), (48000, 22050), (8000, 24000)])
    def test_length(self, src, dst, rng):
        for n in (1, 999, 4410, 12345):
            assert len(resample(Waveform(rng.standard_normal(n), src), dst)) == round(n * dst / src)

    def test_round_trip_bandlimited(self, rng):
        x = _bandlimited(48000, 48000, 7000, rng)
        y = resample(resample(Waveform(x, 48000), 16000), 48000).samples
        assert _rel(y, x) < 1e-3

    def test_upsampling_leaves_no_images(self, rng):
        x = Waveform(rng.standard_normal(16000) * np.hanning(16000), 16000)
        y = resample(x, 48000).samples
        assert band_energy_fraction(y, 48000, 8000) < 1e-6

    def test_unsupported_target(self):
        with pytest.raises(UnsupportedRateError):
            resample(Waveform(np.zeros(10), 16000), 12000)


class TestCws:
    def _spec(self, rng, frames=7):
        data = rng.standard_normal((frames, 769)) + 1j * rng.standard_normal((frames, 769))
        return ComplexSpectrogram(data, DEFAULT_STFT, 48000)

    def test_edges(self):
        assert subband_edges(769) == [0, 256, 512, 769]

    def test_bins_sum_to_total(self, rng):
        stack = cws_split(self._spec(rng))
        assert sum(b.shape[1] for b in stack.bands) == 769
        assert stack.bands[2].shape[1] == 257  # Nyquist bin in the top band

    def test_bands_are_slices(self, rng):
        spec = self._spec(rng)
        stack = cws_split(spec)
        for b, (lo, hi) in zip(stack.bands, zip(stack.band_edges[:-1], stack.band_edges[1:])):
            assert np.array_equal(b, spec.data[:, lo:hi])

    def test_round_trip_bit_exact(self, rng):
        spec = self._spec(rng)
        assert np.array_equal(cws_merge(cws_split(spec)).data, spec.data)

    def test_bandlimited_input_has_empty_upper_bands(self, rng):
        x = _bandlimited(48000, 48000, 7500, rng)
        spec = stft(Waveform(x, 48000))
        spec.data[:, 256:] = 0.0  # 8 kHz and up exactly zero
        stack = cws_split(spec)
        assert not np.any(stack.bands[1]) and not np.any(stack.bands[2])
        assert np.any(stack.bands[0])

    def test_merge_zero(self):
        stack = SubbandStack([np.zeros((3, 256)), np.zeros((3, 256)), np.zeros((3, 257))])
        assert not np.any(cws_merge(stack).data)

    def test_permuted_bands_differ(self, rng):
        stack = cws_split(self._spec(rng))
        perm = SubbandStack([stack.bands[1], stack.bands[0], stack.bands[2]])
        assert not np.array_equal(cws_merge(perm).data, cws_merge(stack).data)

    def test_wrong_band_count(self):
        with pytest.raises(ShapeMismatchError):
            SubbandStack([np.zeros((3, 256))] * 2)

    def test_non_fullband_rejected(self):
        spec = ComplexSpectrogram(np.zeros((3, 257)), DEFAULT_STFT, 16000)
        with pytest.raises(UnsupportedRateError):
            cws_split(spec)

    def test_channel_stack(self, rng):
        stack = cws_split(self._spec(rng))
        ch = stack.as_channels()
        assert ch.shape == (3, 7, 257)
        assert np.all(ch[0, :, 256] == 0)

    def test_tensor_round_trip_bit_exact(self, rng):
        spec = torch.from_numpy(self._spec(rng).data)[None]
        chans = cws_split_tensor(spec)
        assert chans.shape == (1, 6, 7, 257)
        assert torch.equal(cws_merge_tensor(chans, 769), spec)


def test_band_split_sums_to_input(rng):
    x = torch.from_numpy(rng.standard_normal((2, 1000)))
    bands = band_split_tensor(x)
    assert bands.shape == (2, 3, 1000)
    torch.testing.assert_close(bands.sum(-2), x, rtol=0, atol=1e-12)
