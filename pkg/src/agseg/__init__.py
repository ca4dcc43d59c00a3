"""Attention-gated, edge-supervised convolutional autoencoder for binary
segmentation, with its own reverse-mode autodiff engine, training harness,
subject-wise cross-validation, and CLI."""

from .autodiff import Tensor
from .data import (AugmentationSpec, Manifest, SampleRecord, augment,
                   load_manifest, load_sample, resize, synth_corpus,
                   write_manifest)
from .edge import edge_target_from_mask, pool_target
from .metrics import (ConfusionMatrix, FoldPlan, MetricsReport, confusion,
                      fold_records, kfold_plan, metrics, split_622)
from .model import (NetworkConfig, NetworkState, build_network, forward,
                    load_network, network_gradcheck, parameter_count,
                    save_network, total_loss)
from .nn import (AdamState, LossConfig, ParamStore, adam_step, bce_loss,
                 focal_bce_loss, l2_penalty, load_checkpoint, save_checkpoint)
from .train import (EarlyStopPolicy, FoldResult, HyperConfig, TrainRunReport,
                    check_early_stop, evaluate, hyper_search, run_cv,
                    train_622, train_epoch)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "AugmentationSpec", "Manifest", "SampleRecord", "augment", "load_manifest",
    "load_sample", "resize", "synth_corpus", "write_manifest",
    "edge_target_from_mask", "pool_target",
    "ConfusionMatrix", "FoldPlan", "MetricsReport", "confusion", "fold_records",
    "kfold_plan", "metrics", "split_622",
    "NetworkConfig", "NetworkState", "build_network", "forward", "load_network",
    "network_gradcheck", "parameter_count", "save_network", "total_loss",
    "AdamState", "LossConfig", "ParamStore", "adam_step", "bce_loss",
    "focal_bce_loss", "l2_penalty", "load_checkpoint", "save_checkpoint",
    "EarlyStopPolicy", "FoldResult", "HyperConfig", "TrainRunReport",
    "check_early_stop", "evaluate", "hyper_search", "run_cv", "train_622",
    "train_epoch",
]
