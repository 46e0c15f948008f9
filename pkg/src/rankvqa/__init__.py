"""Hybrid classification + margin-ranking training for feature-level visual question answering."""

from .data import Dataset, Sample, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split
from .losses import (EvalReport, HybridConfig, LossBreakdown, RankingConfig, cross_entropy, evaluate,
                     hybrid_loss, rank_of_correct, ranking_loss)
from .model import ModelConfig, RankVqaModel, count_params, forward, forward_batch, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, finite_diff_grad, make_rng
from .training import AdamState, EarlyStopper, TrainConfig, adam_step, fit

__version__ = "0.1.0"
