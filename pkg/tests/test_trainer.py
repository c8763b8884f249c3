import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import toys
from tristage.degrade import default_recipe, simulate_pair
from tristage.errors import ConfigurationError, InvalidArgumentError, NonFiniteLossError
from tristage.nets.bundle import load_checkpoint
from tristage.nets.gridnet import GridNetConfig
from tristage.synth import synth_corpus
from tristage.trainer import (
    SCHEDULES,
    FixedPairSource,
    PreviousStageSource,
    SimulatedSource,
    TrainConfig,
    TrainPhase,
    TrainSchedule,
    build_stage_model,
    export_model_checkpoint,
    finetune,
    lr_at,
    train_stage,
)

MICRO = GridNetConfig(8, 1, 4, 4, 8, 2, 2)

# batch, length (s), steps, warm-up, min lr, max lr
TABLE = {
    "fill": (6, 2.0, 50000, 5000, 1e-6, 1e-3),
    "sep": (1, 4.0, 200000, 20000, 1e-6, 1e-3),
    "maft": (1, 4.0, 5000, 1500, 1e-6, 1e-4),
    "res": (6, 2.0, 100000, 10000, 1e-6, 5e-4),
    "saft_jft": (6, 2.0, 25000, 2500, 1e-6, 1e-4),
}


class TestSchedule:
    @pytest.mark.parametrize("name", sorted(TABLE))
    def test_presets(self, name):
        s = SCHEDULES[name]
        assert (s.batch_per_device, s.utt_len_s, s.total_steps, s.warmup_steps, s.min_lr, s.max_lr) == TABLE[name]

    @pytest.mark.parametrize("name", sorted(TABLE))
    def test_endpoints_exact(self, name):
        s = SCHEDULES[name]
        assert (lr_at(0, s), lr_at(s.warmup_steps, s), lr_at(s.total_steps, s)) == (s.min_lr, s.max_lr, s.min_lr)

    def test_warmup_linear(self):
        s = SCHEDULES["fill"]
        assert lr_at(2500, s) == pytest.approx((1e-6 + 1e-3) / 2, rel=1e-12)

    def test_cosine_midpoint(self):
        s = SCHEDULES["res"]
        mid = (s.warmup_steps + s.total_steps) // 2
        assert lr_at(mid, s) == pytest.approx((s.min_lr + s.max_lr) / 2, rel=1e-9)

    @given(step=st.integers(0, 50000))
    def test_bounded(self, step):
        s = SCHEDULES["fill"]
        assert s.min_lr <= lr_at(step, s) <= s.max_lr

    def test_monotone_pieces(self):
        s = SCHEDULES["maft"]
        lrs = [lr_at(t, s) for t in range(0, s.total_steps + 1, 50)]
        k = s.warmup_steps // 50
        assert all(a <= b for a, b in zip(lrs[:k], lrs[1 : k + 1]))
        assert all(a >= b for a, b in zip(lrs[k:], lrs[k + 1 :]))

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            lr_at(-1, SCHEDULES["fill"])
        with pytest.raises(InvalidArgumentError):
            lr_at(50001, SCHEDULES["fill"])

    def test_scaled(self):
        s = SCHEDULES["sep"].scaled(100)
        assert (s.total_steps, s.warmup_steps, s.min_lr, s.max_lr) == (2000, 200, 1e-6, 1e-3)
        assert lr_at(200, s) == 1e-3

    @pytest.mark.parametrize("kw", [{"warmup_steps": 10, "total_steps": 10}, {"min_lr": 1e-2, "max_lr": 1e-3}, {"batch_per_device": 0}])
    def test_invalid(self, kw):
        base = dict(batch_per_device=1, utt_len_s=1.0, total_steps=10, warmup_steps=1, min_lr=1e-6, max_lr=1e-3)
        base.update(kw)
        with pytest.raises(InvalidArgumentError):
            TrainSchedule(**base)


class TestConfigAndPhases:
    def test_adversarial_flags(self):
        s = TrainSchedule(1, 0.25, 4, 1, 1e-4, 1e-3)
        assert TrainConfig("fill", s).adversarial and TrainConfig("res", s).adversarial
        assert not TrainConfig("sep", s).adversarial
        assert not TrainConfig("res", s, TrainPhase("maft")).adversarial
        assert TrainConfig("res", s, TrainPhase("jft", "previous_stage_output")).adversarial

    def test_jft_needs_discriminators(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig("sep", SCHEDULES["sep"], TrainPhase("jft", "previous_stage_output"))

    def test_saft_needs_previous_outputs(self):
        with pytest.raises(InvalidArgumentError):
            TrainPhase("saft")

    def test_wrong_model_kind(self, tmp_path):
        cfg = TrainConfig("sep", TrainSchedule(1, 0.25, 2, 1, 1e-4, 1e-3))
        src = SimulatedSource(synth_corpus(1, 0.5, 16000, 0), default_recipe("sep"), 1, 0.25)
        with pytest.raises(ConfigurationError):
            train_stage(cfg, build_stage_model("fill", MICRO, 0), src, tmp_path)

    def test_source_skips_low_rate(self):
        with pytest.raises(ConfigurationError):
            SimulatedSource(synth_corpus(2, 0.5, 8000, 0), default_recipe("sep"), 1, 0.25)


def _sep_run(tmp_path, steps=4, **kw):
    cfg = TrainConfig("sep", TrainSchedule(1, 0.25, steps, 1, 1e-4, 1e-3), validate_every=2, **kw)
    src = SimulatedSource(synth_corpus(2, 0.5, 16000, 0), default_recipe("sep"), 1, 0.25)
    val = src.pairs(np.random.default_rng(9), 1)
    return train_stage(cfg, build_stage_model("sep", MICRO, 0), src, tmp_path, rng=np.random.default_rng(0), val_pairs=val)


class TestTrainLoop:
    def test_logs_and_validation(self, tmp_path):
        res = _sep_run(tmp_path)
        lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == [0, 1, 2, 3]
        assert all(math.isfinite(r["total"]) for r in lines)
        assert {"val_sdr_in", "val_sdr_out", "val_l1"} <= set(lines[1]) and "val_l1" not in lines[0]
        assert res.last_checkpoint.exists()

    def test_export(self, tmp_path):
        res = _sep_run(tmp_path)
        export_model_checkpoint(res.last_checkpoint, tmp_path / "sep.pt")
        model, _ = load_checkpoint(tmp_path / "sep.pt")
        for v, v2 in zip(res.model.state_dict().values(), model.state_dict().values()):
            assert torch.equal(v, v2)

    def test_nonfinite_loss_dumps_batch(self, tmp_path):
        model = build_stage_model("sep", MICRO, 0)
        with torch.no_grad():
            model.net.conv_out.bias.fill_(float("nan"))
        cfg = TrainConfig("sep", TrainSchedule(1, 0.25, 3, 1, 1e-4, 1e-3))
        src = SimulatedSource(synth_corpus(1, 0.5, 16000, 0), default_recipe("sep"), 1, 0.25)
        with pytest.raises(NonFiniteLossError) as info:
            train_stage(cfg, model, src, tmp_path, rng=np.random.default_rng(0))
        dump = torch.load(info.value.dump_path, weights_only=False)
        assert dump["step"] == 0 and dump["inputs"].shape == (1, 4000)

    def test_missing_resume_checkpoint(self, tmp_path):
        cfg = TrainConfig("sep", TrainSchedule(1, 0.25, 2, 1, 1e-4, 1e-3))
        src = SimulatedSource(synth_corpus(1, 0.5, 16000, 0), default_recipe("sep"), 1, 0.25)
        with pytest.raises(ConfigurationError):
            train_stage(cfg, build_stage_model("sep", MICRO, 0), src, tmp_path, resume_from=tmp_path / "none.pt")

    def test_fixed_pairs_distinct(self):
        pairs = [simulate_pair(c, default_recipe("sep"), np.random.default_rng(i)) for i, c in enumerate(synth_corpus(3, 0.25, 16000, 0))]
        batch = FixedPairSource(pairs, 3).next_batch(np.random.default_rng(0))
        rows = {tuple(r[:20].tolist()) for r in batch.inputs}
        assert len(rows) == 3


class TestDeterminism:
    def test_identical_logs_and_resume(self, tmp_path):
        a = toys.run_determinism(tmp_path / "a")
        b = toys.run_determinism(tmp_path / "b")
        log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        assert log_a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        toys.run_determinism(tmp_path / "c", stop_at=50)
        toys.run_determinism(tmp_path / "c", resume_from=tmp_path / "c" / "ckpt_00000050.pt")
        assert (tmp_path / "c" / "metrics.jsonl").read_bytes() == log_a
        for v, v2 in zip(a.model.state_dict().values(), b.model.state_dict().values()):
            assert torch.equal(v, v2)


class TestFinetune:
    def _setup(self):
        cfg = TrainConfig("sep", TrainSchedule(1, 0.25, 2, 1, 1e-4, 1e-3))
        src = SimulatedSource(synth_corpus(1, 0.5, 16000, 0), default_recipe("sep"), 1, 0.25)
        return cfg, src

    def test_needs_model(self, tmp_path):
        cfg, src = self._setup()
        with pytest.raises(ConfigurationError):
            finetune(TrainPhase("maft"), cfg, None, src, tmp_path)

    def test_rejects_base(self, tmp_path):
        cfg, src = self._setup()
        with pytest.raises(InvalidArgumentError):
            finetune(TrainPhase("base"), cfg, build_stage_model("sep", MICRO, 0), src, tmp_path)

    def test_saft_needs_frozen_stages(self, tmp_path):
        cfg, src = self._setup()
        with pytest.raises(ConfigurationError):
            finetune(TrainPhase("saft", "previous_stage_output"), cfg, build_stage_model("sep", MICRO, 0), src, tmp_path)

    def test_maft_runs_with_metric_terms(self, tmp_path):
        cfg, src = self._setup()
        cfg.enabled_terms = ("mcd", "pesq")
        res = finetune(TrainPhase("maft"), cfg, build_stage_model("sep", MICRO, 0), src, tmp_path, rng=np.random.default_rng(0))
        assert {"mcd", "pesq"} <= set(res.records[0])

    def test_saft_feeds_previous_outputs_and_freezes(self, tmp_path):
        cfg, src = self._setup()
        fill = build_stage_model("fill", MICRO, 1)
        with torch.no_grad():
            fill.net.conv_out.bias.fill_(0.05)
        before = [p.clone() for p in fill.parameters()]
        prev = PreviousStageSource(src, fill)
        b1 = src.next_batch(np.random.default_rng(3))
        b2 = prev.next_batch(np.random.default_rng(3))
        assert not torch.equal(b1.inputs, b2.inputs) and torch.equal(b1.targets, b2.targets)
        finetune(TrainPhase("saft", "previous_stage_output"), cfg, build_stage_model("sep", MICRO, 0), src, tmp_path, prev_fill=fill)
        assert all(torch.equal(p, q) for p, q in zip(before, fill.parameters()))
