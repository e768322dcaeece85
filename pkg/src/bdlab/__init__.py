"""Laboratory for partition-scoped backdoor attacks on image classifiers."""

__version__ = "0.1.0"

from .datasets import ClassRemap, ImageBatch, augment, load_dataset, remap_classes
from .errors import (BdlabError, CheckpointError, ConfigError, DatasetError,
                     DefenseError, PartitionError, PoisonError, TrainingError,
                     TriggerError)
from .metrics import AttackReport, asr, asr_matrix, benign_accuracy, label_specificity
from .models import ModelHandle, load_checkpoint, save_checkpoint
from .partition import (FeatureEncoder, Partitioner, balance_partitions,
                        build_surrogate_dataset, extract_features, gmm_fit,
                        kmeans_fit, max_overlap)
from .poisoning import PoisonPlan, build_epoch
from .training import TrainConfig, fine_tune, train, train_clean
from .triggers import TriggerSpec, apply_combo, apply_trigger, default_registry

__all__ = [
    "__version__",
    "AttackReport", "BdlabError", "CheckpointError", "ClassRemap", "ConfigError",
    "DatasetError", "DefenseError", "FeatureEncoder", "ImageBatch", "ModelHandle",
    "PartitionError", "Partitioner", "PoisonError", "PoisonPlan", "TrainConfig",
    "TrainingError", "TriggerError", "TriggerSpec",
    "apply_combo", "apply_trigger", "asr", "asr_matrix", "augment",
    "balance_partitions", "benign_accuracy", "build_epoch", "build_surrogate_dataset",
    "default_registry", "extract_features", "fine_tune", "gmm_fit", "kmeans_fit",
    "label_specificity", "load_checkpoint", "load_dataset", "max_overlap",
    "remap_classes", "save_checkpoint", "train", "train_clean",
]
