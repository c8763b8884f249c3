from .adversarial import discriminator_loss, feature_matching_loss, gan_losses, generator_adv_loss
from .composite import MAFT_PRESETS, METRIC_TERMS, l2_metric_aware, l3_jft, resolve_terms, stage_gan_loss
from .metric import (
    MetricScorer,
    MfccConfig,
    get_scorer,
    log_mel,
    mcd_aware_loss,
    mel_filterbank,
    mfcc,
    register_scorer,
    reset_scorers,
    scored_metric_loss,
    wavlm_distill_loss,
)
from .spectral import (
    EPS,
    L1_TERMS,
    LossReport,
    LossWeights,
    l1_composite,
    l1_terms,
    lsd_loss,
    mag_loss,
    log_mel_l1_loss,
    phase_imag_loss,
    phase_real_loss,
    sdr_loss,
)
