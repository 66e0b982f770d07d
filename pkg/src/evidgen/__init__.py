"""Evidentiality-guided retrieval-augmented generation toolkit.

A from-scratch fusion encoder-decoder reads retrieved passages and
generates answers; an auxiliary evidentiality head classifies each
passage as evidence or distractor. Supervision for that head is mined
with leave-one-out generation probes and generalized by a trained
labeling model. Submodules: ``corpus`` (data model), ``metrics``,
``model`` (the generator), ``training``, ``loo`` (label mining),
``labeler`` (the labeling model), ``synthetic`` (diagnostic dataset),
``analysis``, ``pipeline``, and ``cli``.
"""

from .corpus import (Example, EvidentialityLabel, Passage, PassageChunk,
                     chunk_passages, load_examples_jsonl, load_labels_jsonl,
                     save_examples_jsonl, save_labels_jsonl)
from .metrics import (MetricReport, accuracy, evaluate_predictions,
                      exact_match, normalize_answer, token_f1, top_k_recall)
from .model import (FusionModel, LossBreakdown, ModelConfig,
                    desk_model_config, load_checkpoint, save_checkpoint)
from .training import (DEFAULT_LAMBDA, Trainer, TrainingConfig, attach_labels,
                       desk_preset, paper_preset, train_loop)
from .loo import MinedPair, ModelPredictor, mine_dataset, pairs_to_labels
from .labeler import (Labeler, LabelerConfig, assign_silver_labels,
                      train_labeler)
from .synthetic import SyntheticSpec, generate_dataset, rule_based_reader
from .pipeline import PipelineConfig, ablate, run_full_pipeline

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LAMBDA",
    "Example",
    "EvidentialityLabel",
    "FusionModel",
    "Labeler",
    "LabelerConfig",
    "LossBreakdown",
    "MetricReport",
    "MinedPair",
    "ModelConfig",
    "ModelPredictor",
    "Passage",
    "PassageChunk",
    "PipelineConfig",
    "SyntheticSpec",
    "Trainer",
    "TrainingConfig",
    "__version__",
    "ablate",
    "accuracy",
    "assign_silver_labels",
    "attach_labels",
    "chunk_passages",
    "desk_model_config",
    "desk_preset",
    "evaluate_predictions",
    "exact_match",
    "generate_dataset",
    "load_checkpoint",
    "load_examples_jsonl",
    "load_labels_jsonl",
    "mine_dataset",
    "normalize_answer",
    "paper_preset",
    "pairs_to_labels",
    "rule_based_reader",
    "run_full_pipeline",
    "save_checkpoint",
    "save_examples_jsonl",
    "save_labels_jsonl",
    "token_f1",
    "top_k_recall",
    "train_labeler",
    "train_loop",
]
