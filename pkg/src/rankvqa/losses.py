"""Classification and margin-ranking objectives plus Accuracy/MRR evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Rng, Tensor


@dataclass
class RankingConfig:
    margin_alpha: float = 0.2
    negatives: str = "all"  # "all" or "sampled"
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.margin_alpha < 0:
            raise ConfigError(f"margin_alpha must be nonnegative, got {self.margin_alpha}")
        if self.negatives not in ("all", "sampled"):
            raise ConfigError(f"negatives must be 'all' or 'sampled', got {self.negatives!r}")
        if self.negatives == "sampled" and self.k < 1:
            raise ConfigError(f"sampled negatives need k >= 1, got {self.k}")


@dataclass
class HybridConfig:
    lambda_rank: float = 1.0
    schedule: str = "constant"  # "constant" or "linear_ramp"
    ramp_epochs: int = 10

    def __post_init__(self):
        if self.lambda_rank < 0:
            raise ConfigError(f"lambda_rank must be nonnegative, got {self.lambda_rank}")
        if self.schedule not in ("constant", "linear_ramp"):
            raise ConfigError(f"schedule must be 'constant' or 'linear_ramp', got {self.schedule!r}")
        if self.schedule == "linear_ramp" and self.ramp_epochs < 1:
            raise ConfigError(f"ramp_epochs must be >= 1, got {self.ramp_epochs}")

    def weight(self, epoch: int) -> float:
        """Ranking weight at a 0-based epoch."""
        if self.schedule == "constant":
            return self.lambda_rank
        return self.lambda_rank * min(1.0, max(0, epoch) / self.ramp_epochs)


@dataclass
class LossBreakdown:
    cls: float
    rank: float
    total: float
    lambda_used: float
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)


def _check_targets(targets, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) != 2:
        raise DimensionError(f"expected a [B, A] score matrix, got shape {shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size != shape[0]:
        raise DimensionError(f"{t.size} targets for a batch of {shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= shape[1]):
        raise ContractError(f"targets must lie in [0, {shape[1]}), got {t.tolist()}")
    return t


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the targets under softmax(logits)."""
    t = _check_targets(targets, logits.shape)
    logp = T.log_softmax(logits, axis=-1)
    picked = T.index(logp, (np.arange(t.size), t))
    return T.scale(T.tsum(picked), -1.0 / t.size)


def negative_mask(targets: np.ndarray, n_answers: int, cfg: RankingConfig,
                  rng: Rng | None = None) -> np.ndarray:
    """1.0 where an answer is a chosen negative for that sample."""
    B = targets.size
    mask = np.ones((B, n_answers))
    mask[np.arange(B), targets] = 0.0
    if cfg.negatives == "sampled" and cfg.k < n_answers - 1:
        if rng is None:
            raise ConfigError("sampled negatives need an rng")
        mask[:] = 0.0
        for b, tgt in enumerate(targets):
            pool = np.delete(np.arange(n_answers), tgt)
            mask[b, rng.choice(pool, size=cfg.k, replace=False)] = 1.0
    return mask


def ranking_loss(scores: Tensor, targets: Sequence[int], cfg: RankingConfig | None = None,
                 rng: Rng | None = None) -> Tensor:
    """Per sample, sum of max(0, alpha - (s_pos - s_neg)) over negatives; mean over the batch."""
    cfg = cfg or RankingConfig()
    t = _check_targets(targets, scores.shape)
    B, A = scores.shape
    if A < 2:
        raise ContractError("ranking loss needs at least two candidate answers")
    pos = T.reshape(T.index(scores, (np.arange(B), t)), (B, 1))
    hinge = T.relu(T.add(T.sub(scores, pos), cfg.margin_alpha))
    per_sample = T.tsum(T.mul(hinge, negative_mask(t, A, cfg, rng)), axis=1)
    return T.scale(T.tsum(per_sample), 1.0 / B)


def hybrid_loss(logits: Tensor, targets: Sequence[int], rcfg: RankingConfig | None = None,
                hcfg: HybridConfig | None = None, epoch: int = 0,
                rng: Rng | None = None) -> LossBreakdown:
    hcfg = hcfg or HybridConfig()
    cls = cross_entropy(logits, targets)
    rank = ranking_loss(logits, targets, rcfg, rng)
    lam = hcfg.weight(epoch)
    total = T.add(cls, T.scale(rank, lam))
    return LossBreakdown(cls=cls.item(), rank=rank.item(), total=total.item(),
                         lambda_used=lam, total_tensor=total)


# -------------------------------------------------------------------- metrics


def rank_of_correct(scores, target: int) -> int:
    """1-based position of ``target`` after sorting by score descending, ties by index."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 <= target < s.size:
        raise ContractError(f"target {target} outside [0, {s.size})")
    st = s[target]
    ahead = np.count_nonzero(s > st) + np.count_nonzero(s[:target] == st)
    return int(ahead) + 1


def predict(scores) -> np.ndarray:
    """Top-ranked answer per row; np.argmax already returns the lowest tied index."""
    return np.argmax(np.asarray(scores, dtype=np.float64), axis=1)


@dataclass
class EvalReport:
    n: int
    accuracy: float
    mrr: float
    ranks: list[int]
    per_class_accuracy: dict[str, float]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy, "mrr": self.mrr, "ranks": self.ranks,
                "per_class_accuracy": self.per_class_accuracy, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(scores, targets: Sequence[int], config: dict | None = None) -> EvalReport:
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ContractError(f"evaluate needs a non-empty [B, A] score matrix, got shape {s.shape}")
    t = _check_targets(targets, s.shape)
    ranks = [rank_of_correct(row, int(y)) for row, y in zip(s, t)]
    hits = predict(s) == t
    per_class = {}
    for c in np.unique(t):
        sel = t == c
        per_class[str(int(c))] = float(hits[sel].mean())
    n = len(ranks)
    return EvalReport(
        n=n,
        accuracy=float(hits.sum()) / n,
        mrr=float(sum(1.0 / r for r in ranks)) / n,
        ranks=ranks,
        per_class_accuracy=per_class,
        config=dict(config or {}),
    )
