"""Adversarial training with paired logits and spatial attention maps.

The library trains small grouped convolutional classifiers whose loss ties
each clean image to its adversarial counterpart twice over: once at the
logits and once at the spatial attention maps of tapped convolutional
groups. A PGD attack engine drives both the training-time inner maximization
and the gray-box/black-box robustness evaluation harness.
"""

from .attack import AttackConfig, attack_sweep, pgd_attack, project
from .backbone import ARCHITECTURES, ForwardResult, GroupedConvNet, build_model
from .dataio import (
    Dataset,
    ImageBatch,
    load_checkpoint,
    load_dataset,
    load_masks,
    save_checkpoint,
    save_report,
)
from .errors import (
    AtPairError,
    CheckpointError,
    ConfigurationError,
    DatasetError,
    InputError,
    TrainingDivergedError,
)
from .evalharness import (
    EvalReport,
    ThreatModel,
    clean_accuracy,
    evaluate_robustness,
    export_attention_heatmaps,
    key_region_activation,
    region_concentration,
)
from .pairing import (
    PairingConfig,
    alp_loss,
    at_loss,
    attention_map,
    combined_loss,
    combined_loss_with_grads,
    softmax_cross_entropy,
)
from .trainer import TrainConfig, TrainingLog, train, train_variants

__all__ = [
    "ARCHITECTURES",
    "AtPairError",
    "AttackConfig",
    "CheckpointError",
    "ConfigurationError",
    "Dataset",
    "DatasetError",
    "EvalReport",
    "ForwardResult",
    "GroupedConvNet",
    "ImageBatch",
    "InputError",
    "PairingConfig",
    "ThreatModel",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainingLog",
    "alp_loss",
    "at_loss",
    "attack_sweep",
    "attention_map",
    "build_model",
    "clean_accuracy",
    "combined_loss",
    "combined_loss_with_grads",
    "evaluate_robustness",
    "export_attention_heatmaps",
    "key_region_activation",
    "load_checkpoint",
    "load_dataset",
    "load_masks",
    "pgd_attack",
    "project",
    "region_concentration",
    "save_checkpoint",
    "save_report",
    "softmax_cross_entropy",
    "train",
    "train_variants",
]

__version__ = "0.1.0"
