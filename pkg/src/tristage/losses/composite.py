"""Composite objectives: metric-aware regression, GAN stage loss and the joint fine-tuning loss."""

from __future__ import annotations

from typing import Dict, Iterable, Optional

import torch

from ..dsp import DEFAULT_STFT, StftConfig
from ..errors import InvalidArgumentError
from ..nets.discriminators import DiscriminatorOutput
from .adversarial import gan_losses
from .metric import MfccConfig, get_scorer, mcd_aware_loss, scored_metric_loss
from .spectral import L1_TERMS, LossReport, LossWeights, _resolve_fs, as_tensor, l1_terms, log_mel_l1_loss

METRIC_TERMS = ("mcd", "pesq", "utmos", "dnsmos", "wavlm")
MAFT_PRESETS: Dict[str, tuple] = {
    "none": (),
    "v1": ("mcd",),
    "v2": ("mcd", "pesq"),
    "v3": ("mcd", "pesq", "utmos"),
    "v4": ("mcd", "pesq", "utmos", "dnsmos"),
    "v5": ("mcd", "pesq", "utmos", "dnsmos", "wavlm"),
}


def resolve_terms(enabled) -> tuple:
    """Accepts a preset name or an iterable of term names; returns them in canonical order."""
    if isinstance(enabled, str):
        if enabled not in MAFT_PRESETS:
            raise InvalidArgumentError(f"unknown metric-aware preset {enabled!r}")
        return MAFT_PRESETS[enabled]
    enabled = set(enabled or ())
    unknown = enabled - set(METRIC_TERMS)
    if unknown:
        raise InvalidArgumentError(f"unknown metric-aware terms: {sorted(unknown)}")
    return tuple(t for t in METRIC_TERMS if t in enabled)


def metric_term(name: str, s, s_hat, fs: int, mfcc_cfg: MfccConfig = MfccConfig()) -> torch.Tensor:
    if name == "mcd":
        return mcd_aware_loss(s, s_hat, fs, mfcc_cfg)
    return scored_metric_loss(get_scorer(name), s_hat, s, fs)


def l2_metric_aware(
    s,
    s_hat,
    enabled_terms: Iterable[str] | str = (),
    weights: LossWeights = LossWeights(),
    fs: Optional[int] = None,
    stft_cfg: StftConfig = DEFAULT_STFT,
    mfcc_cfg: MfccConfig = MfccConfig(),
) -> LossReport:
    """Base regression terms plus the enabled metric-aware terms."""
    fs = _resolve_fs(s, fs)
    s, s_hat = as_tensor(s), as_tensor(s_hat)
    names = resolve_terms(enabled_terms)
    terms = l1_terms(s, s_hat, fs, stft_cfg)
    for name in names:
        terms[name] = metric_term(name, s, s_hat, fs, mfcc_cfg)
    return LossReport(terms, {k: getattr(weights, k) for k in terms})


def stage_gan_loss(
    s, s_hat, real: DiscriminatorOutput, fake: DiscriminatorOutput, fs: int, weights: LossWeights = LossWeights()
):
    """Generator objective of the GAN stages and the discriminator objective.

    Returns ``(generator_report, adv_d)``; the report holds recon/adv/feat
    weighted 20/1/1 by default.
    """
    adv_g, adv_d, feat = gan_losses(real, fake)
    recon = log_mel_l1_loss(as_tensor(s), as_tensor(s_hat), fs)
    report = LossReport(
        {"recon": recon, "adv": adv_g, "feat": feat},
        {"recon": weights.recon, "adv": weights.adv, "feat": weights.feat},
    )
    return report, adv_d


def l3_jft(
    s,
    s_hat,
    disc_terms,
    weights: LossWeights = LossWeights(),
    enabled_terms: Iterable[str] | str = "v3",
    fs: Optional[int] = None,
    stft_cfg: StftConfig = DEFAULT_STFT,
    mfcc_cfg: MfccConfig = MfccConfig(),
) -> LossReport:
    """10 * L2 + adv + 0.2 * feat by default.

    ``disc_terms`` is either ``(real, fake)`` discriminator outputs or a
    precomputed ``(adv_g, feat_match)`` pair.
    """
    l2 = l2_metric_aware(s, s_hat, enabled_terms, weights, fs, stft_cfg, mfcc_cfg)
    a, b = disc_terms
    if isinstance(a, DiscriminatorOutput):
        adv_g, _, feat = gan_losses(a, b)
    else:
        adv_g, feat = torch.as_tensor(a), torch.as_tensor(b)
    report = LossReport(
        {"l2": l2.total, "adv": adv_g, "feat": feat},
        {"l2": weights.jft_l2, "adv": weights.jft_adv, "feat": weights.jft_feat},
    )
    report.parts = l2  # per-term breakdown of the L2 component for logging
    return report
