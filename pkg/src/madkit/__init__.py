"""Morphing attack detection toolkit.

A self-contained stack for training and evaluating binary morph detectors:
a ViT image encoder with optional rank-stabilised low-rank adapters on the
attention q/v projections, a softmax detection head, zero-shot scoring
against label embeddings, presentation-attack metrics (EER, APCER, BPCER,
DET curves), and a deterministic synthetic benchmark.
"""

from . import checkpoint, data, head, lora, metrics, plotting, tensor
from . import training, vit, zero_shot
from .errors import (ConfigError, ContractError, DataError, FormatError,
                     MadkitError, NumericError, ParameterError, ShapeError,
                     StateError)
from .head import ATTACK, BONA_FIDE, LABEL_NAMES, ClassifierHead
from .lora import AdaptedBackbone, LoraPair, gamma, inject, merge
from .metrics import (OperatingPoint, Report, ScoreSet, apcer,
                      apcer_at_bpcer, bpcer, bpcer_at_apcer, build_report,
                      det_curve, eer)
from .tensor import Tape, Tensor, backward
from .training import AdamW, Detector, TrainConfig, train, train_preset
from .vit import PRESETS, TINY, VIT_B, VIT_L, VitBackbone, VitConfig, \
    init_random

__version__ = "0.1.0"

__all__ = [
    "ATTACK", "AdamW", "AdaptedBackbone", "BONA_FIDE", "ClassifierHead",
    "ConfigError", "ContractError", "DataError", "Detector", "FormatError",
    "LABEL_NAMES", "LoraPair", "MadkitError", "NumericError",
    "OperatingPoint", "PRESETS", "ParameterError", "Report", "ScoreSet",
    "ShapeError", "StateError", "TINY", "Tape", "Tensor", "TrainConfig",
    "VIT_B", "VIT_L", "VitBackbone", "VitConfig", "apcer", "apcer_at_bpcer",
    "backward", "bpcer", "bpcer_at_apcer", "build_report", "checkpoint",
    "data", "det_curve", "eer", "gamma", "head", "init_random", "inject",
    "lora", "merge", "metrics", "plotting", "tensor", "train",
    "train_preset", "training", "vit", "zero_shot",
]
