"""retinaforge: lightweight from-scratch CNN toolkit for retinal vessel
segmentation, covering the Unet / MiUnet / Iternet / IterMiUnet family."""

from .architectures import (
    ArchitectureSpec,
    Model,
    build_itermiunet,
    build_iternet,
    build_miunet,
    build_model,
    build_unet,
    count_parameters,
    default_spec,
)
from .engine import ParamStore, Tape, Tensor, adam_step, backward
from .layers import (
    bce_loss,
    concat_channels,
    conv2d,
    dropout,
    max_pool2d,
    relu,
    sigmoid,
    tensor_sum,
    transposed_conv2d,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    RocCurve,
    compute_metrics,
    confusion_within_fov,
    cross_train_eval,
    evaluate_model,
    inter_rater_eval,
    predict_image,
    roc_auc,
)
from .pipeline import (
    PatchSet,
    PipelineParams,
    clahe,
    extract_overlapping_patches,
    gamma_correct,
    generate_fov_mask,
    normalize_dataset,
    preprocess_images,
    recompose,
    rgb_to_gray,
    sample_training_patches,
    split_train_val,
)
from .training import TrainConfig, TrainState, composite_loss, plateau_step, train, validate

__version__ = "0.1.0"
