"""Training laboratory for debiasing CNN classifiers against confounders
observable in control regions: a correlation-driven feature filter, a
synthetic bias-injection harness, and the adversarial evaluation protocol.
"""

from .data import BiasSpec, PairedData, Sample, adversarial_testset, apply_awgn, augment, \
    biased_sample, full_testset, load_dataset, save_dataset, synth_generate
from .decorrelation import CorrelationRecord, DecorreConfig, DecorreLayer, correlation_unit, \
    decorre_backward, decorre_forward, dropout_keep_prob, filter_factor, filter_sigmoid, \
    pearson_corr
from .engine import Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2d, Parameter, ReLU, \
    bce_with_logits, global_avg_pool, grad_check, seeded_rng, sgd_step
from .estimator import DecorreClassifier, validate_images, validate_labels
from .evaluation import EvalReport, HoCData, TrainConfig, histogram_of_correlations, \
    kfold_split, mean_correlation, roc_auc, summarize, train_run
from .models import ARCHITECTURES, ArchitectureSpec, DualBatch, Model, build_model, \
    default_insertion_points, load_checkpoint, medium_custom, plain_spec, read_checkpoint, \
    save_checkpoint, small_custom

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "ArchitectureSpec", "BiasSpec", "Conv2d", "CorrelationRecord",
    "DecorreClassifier", "DecorreConfig", "DecorreLayer", "DualBatch", "EvalReport",
    "Flatten", "GlobalAvgPool", "HoCData", "Layer", "Linear", "MaxPool2d", "Model",
    "PairedData", "Parameter", "ReLU", "Sample", "TrainConfig", "adversarial_testset",
    "apply_awgn", "augment", "bce_with_logits", "biased_sample", "build_model",
    "correlation_unit", "decorre_backward", "decorre_forward", "default_insertion_points",
    "dropout_keep_prob", "filter_factor", "filter_sigmoid", "full_testset",
    "global_avg_pool", "grad_check", "histogram_of_correlations", "kfold_split",
    "load_checkpoint", "load_dataset", "mean_correlation", "medium_custom", "pearson_corr",
    "plain_spec", "read_checkpoint", "roc_auc", "save_checkpoint", "save_dataset",
    "seeded_rng", "sgd_step", "small_custom", "summarize", "synth_generate", "train_run",
    "validate_images", "validate_labels",
]
