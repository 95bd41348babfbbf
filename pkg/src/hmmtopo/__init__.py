"""Hidden Markov model training and flatten-then-prune topology learning."""
from .core import (
    Gaussian,
    GmmEmission,
    HmmError,
    HmmModel,
    UsageError,
    Violation,
    gaussian_log_density,
    gmm_log_density,
    log_sum_exp,
    validate_model,
)
from .corpus import FeatureSequence, SyntheticSpec, Utterance, load_manifest, read_features, sample_corpus, write_features
from .decoding import build_network, classify_isolated, token_decode
from .diagnostics import ideal_path, imbalance_coefficients
from .modelio import format_model, load_model, parse_model, save_model
from .scoring import AlignmentCounts, align, wer
from .topology import SweepConfig, feedback_emissions, flatten_model, prune, run_pipeline, sweep_threshold
from .training import TrainingConfig, baum_welch_train, flat_init, forward_backward, split_mixtures

__version__ = "0.1.0"

__all__ = [
    "AlignmentCounts",
    "FeatureSequence",
    "Gaussian",
    "GmmEmission",
    "HmmError",
    "HmmModel",
    "SweepConfig",
    "SyntheticSpec",
    "TrainingConfig",
    "UsageError",
    "Utterance",
    "Violation",
    "align",
    "baum_welch_train",
    "build_network",
    "classify_isolated",
    "feedback_emissions",
    "flat_init",
    "flatten_model",
    "format_model",
    "forward_backward",
    "gaussian_log_density",
    "gmm_log_density",
    "ideal_path",
    "imbalance_coefficients",
    "load_manifest",
    "load_model",
    "log_sum_exp",
    "parse_model",
    "prune",
    "read_features",
    "run_pipeline",
    "sample_corpus",
    "save_model",
    "split_mixtures",
    "sweep_threshold",
    "token_decode",
    "validate_model",
    "wer",
    "write_features",
]
