"""Context-selection re-scoring of object detections.

Detections are re-scored from object-to-object context: pairwise
co-occurrence, relative scale, and spatial likelihood histograms feed a
per-region selective scorer trained as a latent SVM, and the final
confidence is the margin between a supporting (For) and a refuting
(Against) maximized score. The package also contains the pure-context
prediction study, a synthetic scene benchmark, and an evaluation harness.
"""

__version__ = "0.1.0"

from .context_stats import ContextStats, HistConfig, fit_stats, lookup
from .evaluation import EvalReport, PrCurve, average_precision, precision_thresholds, run_baseline
from .latent_svm import TrainConfig, TrainReport, train_for_against, train_latent, train_select_all
from .pure_context import ClassMask, PureContextModel, accuracy, predict_label, ral, train_pure
from .rescoring import (
    RescoreModel,
    RescoreSample,
    RescoreWeights,
    SelectionTrace,
    build_samples,
    feature_vector,
    margin_score,
    select_and_score,
)
from .scenes import BBox, ClassVocab, Detection, GtObject, Scene, iou, load_dataset, save_dataset
from .synthetic import DetectorSpec, WorldSpec, default_world, generate, rules_world, simulate_detector

__all__ = [
    "__version__",
    "BBox",
    "ClassMask",
    "ClassVocab",
    "ContextStats",
    "Detection",
    "DetectorSpec",
    "EvalReport",
    "GtObject",
    "HistConfig",
    "PrCurve",
    "PureContextModel",
    "RescoreModel",
    "RescoreSample",
    "RescoreWeights",
    "Scene",
    "SelectionTrace",
    "TrainConfig",
    "TrainReport",
    "WorldSpec",
    "accuracy",
    "average_precision",
    "build_samples",
    "default_world",
    "feature_vector",
    "fit_stats",
    "generate",
    "iou",
    "load_dataset",
    "lookup",
    "margin_score",
    "precision_thresholds",
    "predict_label",
    "ral",
    "rules_world",
    "run_baseline",
    "save_dataset",
    "select_and_score",
    "simulate_detector",
    "train_for_against",
    "train_latent",
    "train_pure",
    "train_select_all",
]
