"""One import surface for the evidentiality-guided generator.

The mechanics live where they belong — the network in ``model``, the
schedule in ``training``, supervision sources in ``loo`` and
``labeler`` — but the multi-task method is one thing; this module
collects its public names so user code can import them from one place.
"""

from .corpus import EvidentialityLabel
from .labeler import (LabelerConfig, SilverLabelSet, assign_silver_labels,
                      build_labeler_training_data, desk_labeler_preset,
                      load_labeler, paper_labeler_preset, save_labeler,
                      train_labeler)
from .loo import (MinedPair, ModelPredictor, PredictionLogPredictor,
                  mine_dataset, pairs_to_labels)
from .model import (AttentionSummary, FusionModel, GenerationOutput,
                    LossBreakdown, ModelConfig, desk_model_config,
                    load_checkpoint, save_checkpoint)
from .training import (DEFAULT_LAMBDA, Trainer, TrainingConfig, attach_labels,
                       desk_preset, paper_preset, train_loop)

__all__ = [
    "AttentionSummary",
    "DEFAULT_LAMBDA",
    "EvidentialityLabel",
    "FusionModel",
    "GenerationOutput",
    "LabelerConfig",
    "LossBreakdown",
    "MinedPair",
    "ModelConfig",
    "ModelPredictor",
    "PredictionLogPredictor",
    "SilverLabelSet",
    "Trainer",
    "TrainingConfig",
    "assign_silver_labels",
    "attach_labels",
    "build_labeler_training_data",
    "desk_labeler_preset",
    "desk_model_config",
    "desk_preset",
    "load_checkpoint",
    "load_labeler",
    "mine_dataset",
    "pairs_to_labels",
    "paper_labeler_preset",
    "paper_preset",
    "save_checkpoint",
    "save_labeler",
    "train_labeler",
    "train_loop",
]
