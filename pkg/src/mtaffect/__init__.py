"""Multi-task facial affect heads over precomputed feature vectors.

Three coupled tasks on one backbone feature: action unit detection
through a learned facial relation graph, expression recognition with a
cross-task attention refinement, and valence/arousal regression. All
numerics are plain numpy with hand-derived backward passes, checked
against central finite differences (see :mod:`mtaffect.gradcheck`).
"""

from .data import Dataset, Sample, SynthSpec, load_dataset, save_dataset, synth_generate
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InsufficientDataError,
    LabelError,
    MtaffectError,
    NumericalError,
    ShapeError,
)
from .graph import AU_LABELS, AU_NUMBERS, AnflParams, FacialGraph, anfl_forward, build_facial_graph
from .heads import HeadParams, cross_attention, va_head
from .losses import ClassWeights, au_weights_from_rates, ccc, va_loss, weighted_asymmetric_loss, weighted_cross_entropy
from .metrics import EXPR_LABELS, MetricReport, evaluate_predictions, f1_binary, score_au, score_ex, score_mtl, score_va
from .model import Model, ModelDims, load_checkpoint, save_checkpoint
from .training import TrainConfig, cosine_lr, sam_step, sgd_step, train_stage

__version__ = "0.1.0"

__all__ = [
    "AU_LABELS",
    "AU_NUMBERS",
    "AnflParams",
    "CheckpointError",
    "ClassWeights",
    "ConfigError",
    "DataError",
    "Dataset",
    "EXPR_LABELS",
    "FacialGraph",
    "HeadParams",
    "InsufficientDataError",
    "LabelError",
    "MetricReport",
    "Model",
    "ModelDims",
    "MtaffectError",
    "NumericalError",
    "Sample",
    "ShapeError",
    "SynthSpec",
    "TrainConfig",
    "anfl_forward",
    "au_weights_from_rates",
    "build_facial_graph",
    "ccc",
    "cosine_lr",
    "cross_attention",
    "evaluate_predictions",
    "f1_binary",
    "load_checkpoint",
    "load_dataset",
    "sam_step",
    "save_checkpoint",
    "save_dataset",
    "score_au",
    "score_ex",
    "score_mtl",
    "score_va",
    "sgd_step",
    "synth_generate",
    "train_stage",
    "va_head",
    "va_loss",
    "weighted_asymmetric_loss",
    "weighted_cross_entropy",
    "__version__",
]
