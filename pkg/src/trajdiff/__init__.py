"""Diffusion-based multi-step trajectory recommendation.

Train a conditional denoising model over per-user interaction histories
and predict the next k items as ranked candidate lists, optimized jointly
for reconstruction and listwise ranking.
"""

from .data import (
    Batch,
    InteractionCorpus,
    TrajectoryExample,
    by_split,
    corpus_from_sequences,
    filter_and_split,
    load_interactions,
)
from .estimator import TrajectoryDiffusionRecommender
from .exceptions import (
    ConfigError,
    EmptyCorpusError,
    EmptySplitError,
    NumericsError,
    ParseError,
    VocabularyError,
)
from .losses import (
    LossWeights,
    listwise_preference_loss,
    reg_loss,
    simple_loss,
    soft_listmle,
    total_loss,
)
from .metrics import EvalReport, report_from_scores
from .model import DenoiserConfig, PreferenceDenoiser
from .sampling import batch_predict, evaluate_examples, sample_trajectory
from .schedule import NoiseSchedule, linear_schedule, posterior_step, q_sample, strided_steps
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "Batch",
    "ConfigError",
    "DenoiserConfig",
    "EmptyCorpusError",
    "EmptySplitError",
    "EvalReport",
    "InteractionCorpus",
    "LossWeights",
    "NoiseSchedule",
    "NumericsError",
    "ParseError",
    "PreferenceDenoiser",
    "TrainConfig",
    "TrajectoryDiffusionRecommender",
    "TrajectoryExample",
    "VocabularyError",
    "batch_predict",
    "by_split",
    "corpus_from_sequences",
    "evaluate_examples",
    "filter_and_split",
    "fit",
    "linear_schedule",
    "listwise_preference_loss",
    "load_checkpoint",
    "load_interactions",
    "posterior_step",
    "q_sample",
    "reg_loss",
    "report_from_scores",
    "sample_trajectory",
    "save_checkpoint",
    "simple_loss",
    "soft_listmle",
    "strided_steps",
    "total_loss",
]
