import numpy as np
import pytest
import torch

import criteria
from tristage.audio_io import read_wav, write_wav
from tristage.degrade import apply_bandwidth_limit
from tristage.dsp import Waveform
from tristage.errors import ConfigurationError, InvalidArgumentError
from tristage.nets.bundle import ModelBundle
from tristage.nets.gridnet import GridNetConfig
from tristage.pipeline import (
    DetectorConfig,
    EnhanceRequest,
    choose_route,
    detect_bandwidth_limited,
    enhance,
    enhance_detailed,
    enhance_files,
    run_fill,
    run_res,
    run_sep,
)
from tristage.synth import synth_speech

TOY = GridNetConfig(8, 1, 4, 4, 8, 2, 2)


@pytest.fixture(scope="module")
def bundle():
    b = ModelBundle.build(TOY, TOY, TOY, with_finetuned=True, seed=0).eval()
    with torch.no_grad():  # give the two restoration routes distinguishable outputs
        b.res_finetuned.net.net.conv_out.bias.fill_(0.01)
        b.sep.net.conv_out.bias.zero_()
    return b


class TestDetector:
    @pytest.mark.parametrize("fs", [16000, 24000, 48000])
    def test_fullband(self, fs, rng):
        est = detect_bandwidth_limited(synth_speech(1.0, fs, rng))
        assert not est.is_band_limited
        assert est.effective_cutoff_hz > 0.85 * fs / 2

    @pytest.mark.parametrize("fs,cutoff_fs", [(48000, 8000), (48000, 16000), (44100, 32000), (16000, 8000)])
    def test_band_limited(self, fs, cutoff_fs, rng):
        est = detect_bandwidth_limited(apply_bandwidth_limit(synth_speech(1.0, fs, rng), cutoff_fs))
        assert est.is_band_limited
        assert est.effective_cutoff_hz == pytest.approx(cutoff_fs / 2, rel=0.1)

    def test_too_short(self, rng):
        with pytest.raises(InvalidArgumentError):
            detect_bandwidth_limited(synth_speech(0.2, 16000, rng))

    def test_short_input_uses_base_route(self, rng):
        assert choose_route(synth_speech(0.2, 16000, rng), True) == ("base", None)

    def test_disabled(self, rng):
        w = apply_bandwidth_limit(synth_speech(1.0, 48000, rng), 8000)
        assert choose_route(w, False) == ("base", None)

    def test_silence_is_band_limited(self):
        assert detect_bandwidth_limited(Waveform(np.zeros(16000), 16000)).is_band_limited


class TestRouting:
    def test_suite_fully_correct(self, bundle):
        assert criteria.routing_accuracy(bundle, criteria.routing_suite(20)) == 1.0

    def test_routes_use_different_networks(self, bundle, rng):
        w = synth_speech(1.0, 48000, rng)
        base = run_res(w, bundle, "base").samples
        tuned = run_res(w, bundle, "finetuned").samples
        np.testing.assert_allclose(base, w.samples, atol=1e-12)
        assert not np.allclose(tuned, w.samples)

    def test_bwai_needs_twin(self, rng):
        b = ModelBundle.build(TOY, TOY, TOY, seed=0)
        with pytest.raises(ConfigurationError):
            enhance(EnhanceRequest(synth_speech(1.0, 16000, rng), bwai_enabled=True), b)

    def test_unknown_route(self, bundle, rng):
        with pytest.raises(InvalidArgumentError):
            run_res(synth_speech(0.1, 48000, rng), bundle, "other")


class TestEnhance:
    @pytest.mark.parametrize("fs", [8000, 22050, 44100])
    def test_rate_and_length_preserved(self, bundle, fs, rng):
        w = synth_speech(0.3, fs, rng)
        y = enhance(EnhanceRequest(w), bundle)
        assert y.fs == fs and len(y) == len(w)

    def test_stage_order_and_mask(self, bundle, rng):
        w = synth_speech(0.6, 16000, rng)
        res = enhance_detailed(EnhanceRequest(w, stage_mask=frozenset({"res", "fill"})), bundle)
        assert res.stages_run == ["fill", "res"]

    @pytest.mark.parametrize("mask", [frozenset(), frozenset({"vocode"})])
    def test_bad_mask(self, mask, rng):
        with pytest.raises(InvalidArgumentError):
            EnhanceRequest(synth_speech(0.1, 16000, rng), stage_mask=mask)

    def test_composable_without_normalization(self, bundle, rng):
        w = synth_speech(0.6, 16000, rng)
        full = enhance(EnhanceRequest(w), bundle, normalize_level=False)
        chained = run_res(run_sep(run_fill(w, bundle), bundle), bundle)
        np.testing.assert_array_equal(full.samples, chained.samples)

    def test_normalization_restores_level(self, rng):
        b = ModelBundle.build(TOY, TOY, TOY, seed=0)
        w = synth_speech(0.6, 16000, rng, peak=0.01)
        y = enhance(EnhanceRequest(w, stage_mask=frozenset({"fill"})), b)
        np.testing.assert_allclose(y.samples, w.samples, atol=1e-15)


class TestEnhanceFiles:
    def test_writes_outputs_and_routes(self, bundle, tmp_path, rng):
        full = synth_speech(1.0, 48000, rng)
        limited = apply_bandwidth_limit(synth_speech(1.0, 48000, rng), 8000)
        write_wav(tmp_path / "in" / "full.wav", full)
        write_wav(tmp_path / "in" / "limited.wav", limited)
        info = enhance_files(sorted((tmp_path / "in").glob("*.wav")), tmp_path / "out", bundle, bwai_enabled=True, workers=2)
        routes = {k.split("/")[-1]: v["route"] for k, v in info.items()}
        assert routes == {"full.wav": "base", "limited.wav": "finetuned"}
        out = read_wav(tmp_path / "out" / "full.wav")
        assert out.fs == 48000 and len(out) == len(full)

    def test_bad_file_reported(self, bundle, tmp_path):
        (tmp_path / "broken.wav").write_bytes(b"not audio")
        info = enhance_files([tmp_path / "broken.wav"], tmp_path / "out", bundle)
        assert "error" in info[str(tmp_path / "broken.wav")]
