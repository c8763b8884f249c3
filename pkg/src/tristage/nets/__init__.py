from .discriminators import (
    DiscriminatorOutput,
    DiscriminatorSet,
    MultiBandDiscriminator,
    MultiPeriodDiscriminator,
    MultiResolutionDiscriminator,
    build_discriminators,
    mbd_forward,
    mpd_forward,
    mrd_forward,
)
from .gridnet import (
    PRESET_L,
    PRESET_S,
    PRESETS,
    CWSGridNet,
    GridNetConfig,
    StageModel,
    TFGridNet,
    build_cws_tfgridnet,
    build_tfgridnet,
)
from .bundle import ModelBundle, load_checkpoint, save_checkpoint
