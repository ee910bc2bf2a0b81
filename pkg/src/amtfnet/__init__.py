"""Attention-based multiscale temporal fusion network for uncertain-mode
fault diagnosis, built on a small reverse-mode autodiff tensor engine."""

from .tensor import Tensor, ShapeError, no_grad, grad_check
from .layers import (
    depthwise_conv1d,
    instance_norm,
    conv1d,
    linear,
    dropout,
    gru_step,
    gru_sequence,
    init_params,
)
from .model import (
    ModelConfig,
    AMTFNetParams,
    build_params,
    count_parameters,
    feature_extract,
    temporal_attention,
    se_block,
    fuse,
    classify,
    forward,
    save_checkpoint,
    load_checkpoint,
)
from .data import (
    RawSeries,
    NormStats,
    WindowedDataset,
    SplitSpec,
    GeneratorConfig,
    load_csv,
    write_csv,
    compute_norm_stats,
    apply_zscore,
    slide_windows,
    stratified_split,
    synth_generate,
)
from .train import (
    TrainConfig,
    ConfusionMatrix,
    EvalReport,
    TrainReport,
    cross_entropy,
    lr_schedule,
    train,
    evaluate,
    export_features,
)

__version__ = "0.1.0"
