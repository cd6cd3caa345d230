"""Segmentation features as transferable inputs for small-sample disease classifiers.

A numpy reverse-mode autodiff core, a U-shaped segmentation network whose
intermediate features feed a VGG-style classifier, a synthetic cardiac
phantom generator, and the cross-validation and sweep harnesses that tie
them together.
"""

__version__ = "0.1.0"

from .metrics import ConfusionMatrix2, MetricsRecord, aggregate, cohens_kappa, confusion, dice, mean_std
from .nets import (
    Checkpoint,
    FeatureMode,
    NetworkSpec,
    assemble_features,
    build_clsnet,
    build_segnet,
    clsnet_forward,
    segnet_forward,
)
from .phantom import Corpus, CorpusConfig, LabeledSample, build_corpus, generate_corpus, load_corpus
from .tensor import ShapeError, Tape, Tensor, UsageError, grad_check
from .training import TrainConfig, class_weights, train_clsnet, train_segnet

__all__ = [
    "Checkpoint",
    "ConfusionMatrix2",
    "Corpus",
    "CorpusConfig",
    "FeatureMode",
    "LabeledSample",
    "MetricsRecord",
    "NetworkSpec",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "UsageError",
    "aggregate",
    "assemble_features",
    "build_clsnet",
    "build_corpus",
    "build_segnet",
    "class_weights",
    "clsnet_forward",
    "cohens_kappa",
    "confusion",
    "dice",
    "generate_corpus",
    "grad_check",
    "load_corpus",
    "mean_std",
    "segnet_forward",
    "train_clsnet",
    "train_segnet",
]
