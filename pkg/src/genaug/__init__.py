"""Predict generalization from a classifier's robustness to augmentations."""
from .augment import AugmentationSpec, Augmenter, apply
from .evaluation import CmiScore, ZooEntry, cmi_score, evaluate_zoo, generalization_gap, kendall_tau
from .metric import MetricReport, PenaltyConfig, PenaltyScorer, load_penalty_config, score_model
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec", "Augmenter", "CmiScore", "MetricReport", "PenaltyConfig", "PenaltyScorer",
    "RngStream", "ZooEntry", "apply", "cmi_score", "evaluate_zoo", "generalization_gap",
    "kendall_tau", "load_penalty_config", "score_model",
]
