"""Least-squares GAN objectives and feature matching."""

from __future__ import annotations

from typing import Tuple

import torch

from ..errors import ShapeMismatchError
from ..nets.discriminators import DiscriminatorOutput


def _check(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> None:
    if len(real.scores) != len(fake.scores) or len(real.features) != len(fake.features):
        raise ShapeMismatchError("real and fake outputs come from different discriminator sets")
    for k, (fr, ff) in enumerate(zip(real.features, fake.features)):
        if len(fr) != len(ff):
            raise ShapeMismatchError(f"sub-discriminator {k}: {len(fr)} vs {len(ff)} feature maps")


def generator_adv_loss(fake: DiscriminatorOutput) -> torch.Tensor:
    return torch.stack([((s - 1.0) ** 2).mean() for s in fake.scores]).mean()


def discriminator_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> torch.Tensor:
    terms = [((r - 1.0) ** 2).mean() + (f**2).mean() for r, f in zip(real.scores, fake.scores)]
    return torch.stack(terms).mean()


def feature_matching_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> torch.Tensor:
    """Mean absolute feature difference, averaged over layers and then over sub-discriminators."""
    per_disc = []
    for fr, ff in zip(real.features, fake.features):
        per_disc.append(torch.stack([(a - b).abs().mean() for a, b in zip(fr, ff)]).mean())
    return torch.stack(per_disc).mean()


def gan_losses(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns ``(adv_g, adv_d, feat_match)``.

    Gradient routing is the caller's job: compute ``real`` without graph and
    detach ``fake`` for the discriminator step.
    """
    _check(real, fake)
    return generator_adv_loss(fake), discriminator_loss(real, fake), feature_matching_loss(real, fake)
