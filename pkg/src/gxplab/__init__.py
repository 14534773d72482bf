"""Desk-scale laboratory for gradient attribution, adversarial training with
feature-map smoothing, and explanation-quality metrics."""

__version__ = "0.1.0"

from .tensor import (
    ShapeError,
    Tensor,
    conv1x1,
    conv2d,
    cross_entropy_with_logits,
    depthwise_conv2d,
    maxpool2x2,
    median_filter2d,
)
from .filters import apply_filter, gaussian_kernel, mean_kernel, sigma_for_kernel
from .models import (
    ACTIVATIONS,
    ARCHITECTURES,
    Model,
    SingleLayerModel,
    SmoothBlock,
    SmoothingConfig,
    build_model,
)
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .attribution import (
    AttributionMap,
    closed_form_ig,
    input_gradients,
    integrated_gradients,
    read_attribution,
    saliency_map,
    vanilla_gradient,
    write_attribution,
)
from .stability import (
    ActivationSuprema,
    BoundReport,
    FuzzSummary,
    activation_suprema,
    fuzz_bounds,
    ig_bound,
    vg_bound,
)
from .data import (
    DATASET_NAMES,
    Dataset,
    PerturbationBatch,
    PerturbationSpec,
    get_dataset,
    load_cifar_binary,
    load_idx,
    sample_consistent_perturbations,
    synth10,
    synth_planted,
)
from .training import (
    PGDConfig,
    REGIMES,
    TrainConfig,
    TrainLog,
    evaluate,
    pgd_attack,
    train,
)
from .metrics import (
    METHODS,
    MetricReport,
    RemovalCurve,
    attribution_fn,
    gini,
    noisy_linear_impute,
    road_curve,
    ros,
    select_cohort,
    ssim,
    ssim_stability,
)
from .cli import main

__all__ = [
    "ACTIVATIONS",
    "ARCHITECTURES",
    "ActivationSuprema",
    "AttributionMap",
    "BoundReport",
    "DATASET_NAMES",
    "Dataset",
    "FuzzSummary",
    "METHODS",
    "MetricReport",
    "Model",
    "PGDConfig",
    "PerturbationBatch",
    "PerturbationSpec",
    "REGIMES",
    "RemovalCurve",
    "ShapeError",
    "SingleLayerModel",
    "SmoothBlock",
    "SmoothingConfig",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "activation_suprema",
    "apply_filter",
    "attribution_fn",
    "build_model",
    "closed_form_ig",
    "conv1x1",
    "conv2d",
    "cross_entropy_with_logits",
    "depthwise_conv2d",
    "evaluate",
    "file_digest",
    "fuzz_bounds",
    "gaussian_kernel",
    "get_dataset",
    "gini",
    "ig_bound",
    "input_gradients",
    "integrated_gradients",
    "load_checkpoint",
    "load_cifar_binary",
    "load_idx",
    "main",
    "maxpool2x2",
    "mean_kernel",
    "median_filter2d",
    "noisy_linear_impute",
    "pgd_attack",
    "read_attribution",
    "road_curve",
    "ros",
    "saliency_map",
    "sample_consistent_perturbations",
    "save_checkpoint",
    "select_cohort",
    "sigma_for_kernel",
    "ssim",
    "ssim_stability",
    "synth10",
    "synth_planted",
    "train",
    "vanilla_gradient",
    "vg_bound",
    "write_attribution",
    "__version__",
]
