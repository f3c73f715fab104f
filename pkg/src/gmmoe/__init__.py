"""Gated mixture-of-experts low-light image enhancement."""

from .blocks import (
    ColorExpert,
    DetailExpert,
    FeatureExpert,
    GateNetwork,
    GmMoeBlock,
    GmMoeBlockConfig,
    SFEB,
    SimplifiedChannelAttention,
    fuse_expert_outputs,
    simple_gate,
)
from .checkpoint import (
    CheckpointBundle,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from .config import RunConfig, canonical_digest, load_run_config
from .data import (
    AugmentSpec,
    DatasetManifest,
    decode_image,
    encode_image,
    eval_pair,
    load_manifest,
    sample_training_patch,
    sampler_stream,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DecodeError,
    GMMoEError,
    InputTooSmallError,
    IntegrityError,
    NumericError,
    PairingError,
    ShapeError,
)
from .metrics import MetricReport, mse, psnr_loss, psnr_metric, ssim_metric
from .network import (
    GMMoENet,
    MODEL_PRESETS,
    ModelConfig,
    build_model,
    count_parameters,
    model_components,
    parameter_digest,
    pixel_shuffle,
    pixel_unshuffle,
)
from .training import (
    ABLATION_PRESETS,
    AblationPreset,
    TrainConfig,
    TrainResult,
    ablation_config,
    ablation_model,
    ablation_preset,
    evaluate,
    lr_at,
    train,
)

__version__ = "0.1.0"
