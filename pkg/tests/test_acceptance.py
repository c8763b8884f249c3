"""The ten acceptance criteria; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

import criteria
import toys
from tristage.dsp import SUPPORTED_RATES, StftConfig, Waveform, cws_merge, cws_split, istft, stft
from tristage.nets.audit import audit
from tristage.nets.bundle import ModelBundle
from tristage.nets.gridnet import GridNetConfig
from tristage.trainer import SCHEDULES, lr_at


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return emit


def test_01_formula_oracles(report):
    t0 = time.perf_counter()
    worst = criteria.formula_oracle_errors(200)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-9 and secs < 5.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" ({secs:.1f} s)"
    assert report(1, "formula oracles", ok, detail)


def test_02_gradients(report):
    t0 = time.perf_counter()
    results = {name: criteria.gradient_check(fn, inputs) for name, fn, inputs in criteria.gradient_cases()}
    secs = time.perf_counter() - t0
    failed = [k for k, v in results.items() if not v]
    ok = not failed and secs < 30.0
    assert report(2, "finite-difference gradients", ok, f"{len(results) - len(failed)}/{len(results)} terms ({secs:.1f} s)")


def test_03_composite_weights(report):
    errs = criteria.composite_errors()
    ok = max(errs.values()) < 1e-12
    assert report(3, "composite weights", ok, f"L1, L2 none+v1..v5, L3; max rel err {max(errs.values()):.1e}")


def test_04_structural_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    stft_err = 0.0
    for fs in SUPPORTED_RATES:
        x = rng.standard_normal(int(0.5 * fs) + 11)
        y = istft(stft(Waveform(x, fs)), out_len=len(x)).samples
        stft_err = max(stft_err, float(np.linalg.norm(y - x) / np.linalg.norm(x)))
    spec = stft(Waveform(rng.standard_normal(48000), 48000))
    cws_exact = np.array_equal(cws_merge(cws_split(spec)).data, spec.data)
    ident = criteria.pipeline_identity_errors()
    secs = time.perf_counter() - t0
    ok = stft_err < 1e-6 and cws_exact and max(ident.values()) <= 1e-3 and secs < 20.0
    detail = f"STFT {stft_err:.1e}, CWS bit-exact {cws_exact}, zero-init chain {max(ident.values()):.1e} ({secs:.1f} s)"
    assert report(4, "structural identities", ok, detail)


def test_05_audit(report):
    rep = audit()
    p = rep.total_params / 30.40e6 - 1
    m16 = rep.macs_per_second[16000] / 493.0e9 - 1
    m48 = rep.macs_per_second[48000] / 1360.5e9 - 1
    ok = abs(p) <= 0.10 and abs(m16) <= 0.15 and abs(m48) <= 0.15
    detail = (f"{rep.total_params / 1e6:.2f} M ({p:+.1%}), {rep.macs_per_second[16000] / 1e9:.1f} G @16k ({m16:+.1%}), "
              f"{rep.macs_per_second[48000] / 1e9:.1f} G @48k ({m48:+.1%})")
    assert report(5, "parameter/MACs audit", ok, detail)


def test_06_sfi(report):
    t0 = time.perf_counter()
    res = criteria.sfi_lengths()
    secs = time.perf_counter() - t0
    good = [k for k, (n_in, n_out, finite) in res.items() if n_in == n_out and finite]
    ok = len(good) == 2 * len(SUPPORTED_RATES) and secs < 60.0
    assert report(6, "SFI fill/sep", ok, f"{len(good)}/{len(res)} (stage, rate) cases keep length ({secs:.1f} s)")


def test_07_toy_training(report, toy_fill, toy_sep, toy_res):
    fill = toys.fill_outcome(toy_fill[0], toy_fill[1])
    sep = toys.sep_outcome(toy_sep[0], toy_sep[1])
    res = toys.res_outcome(toy_res[0], toy_res[1])
    secs = toy_fill[2] + toy_sep[2] + toy_res[2]
    ok_a = fill["reduction"] >= 0.5 and fill["gap_energy"] > 0
    ok_b = sep["gain_db"] > 5.0
    ok_c = res["hf_after"] > res["hf_before"]
    ok = ok_a and ok_b and ok_c and secs <= 15 * 60
    detail = (f"(a) recon -{fill['reduction']:.0%}, gap energy {fill['gap_energy']:.2e}; "
              f"(b) SDR +{sep['gain_db']:.2f} dB; (c) >4 kHz fraction {res['hf_before']:.1e} -> {res['hf_after']:.1e} "
              f"({secs:.0f} s CPU)")
    assert report(7, "toy training", ok, detail)


def test_08_schedule_endpoints(report):
    exact = {
        name: (lr_at(0, s), lr_at(s.warmup_steps, s), lr_at(s.total_steps, s)) == (s.min_lr, s.max_lr, s.min_lr)
        for name, s in SCHEDULES.items()
    }
    ok = all(exact.values()) and len(exact) == 5
    assert report(8, "schedule endpoints", ok, ", ".join(f"{k} {'exact' if v else 'off'}" for k, v in exact.items()))


def test_09_bwai_routing(report):
    t0 = time.perf_counter()
    toy = GridNetConfig(8, 1, 4, 4, 8, 2, 2)
    bundle = ModelBundle.build(toy, toy, toy, with_finetuned=True, seed=0).eval()
    cases = criteria.routing_suite(20)
    acc = criteria.routing_accuracy(bundle, cases)
    secs = time.perf_counter() - t0
    ok = acc == 1.0 and len(cases) == 40 and secs < 30.0
    assert report(9, "BWAI routing", ok, f"{acc:.0%} of {len(cases)} utterances ({secs:.1f} s)")


def test_10_determinism(report, tmp_path):
    sim_ok = criteria.simulate_twice_identical(tmp_path / "sim")
    toys.run_determinism(tmp_path / "a")
    toys.run_determinism(tmp_path / "b")
    log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    train_ok = log_a == (tmp_path / "b" / "metrics.jsonl").read_bytes() and len(log_a.splitlines()) == 100
    ok = sim_ok and train_ok
    assert report(10, "determinism", ok, f"simulate byte-identical {sim_ok}, 100-step log identical {train_ok}")
