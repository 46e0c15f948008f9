"""Adam with L2 weight decay, the epoch loop, and patience-based early stopping."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices
from .errors import ConfigError, ContractError
from .losses import HybridConfig, RankingConfig, evaluate, hybrid_loss
from .model import RankVqaModel, save_checkpoint
from .tensor import Rng, Tensor, make_rng

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    max_epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0001
    patience: int = 5
    seed: int = 0
    ranking: RankingConfig = field(default_factory=RankingConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")
        if self.weight_decay < 0 or self.epsilon <= 0:
            raise ConfigError("weight_decay must be >= 0 and epsilon > 0")

    # per-purpose seed derivation from the run seed
    @property
    def dropout_seed(self) -> int:
        return self.seed + 3

    @property
    def shuffle_seed(self) -> int:
        return self.seed + 4


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              cfg: TrainConfig) -> None:
    """One Adam update with the decay term added to the gradient; clears ``p.grad``."""
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractError("params, grads and optimizer state differ in length")
    for i, g in enumerate(grads):
        if g is None:
            raise ContractError(f"parameter {i} has no gradient")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        p.grad = None


class EarlyStopper:
    """Tracks the best validation loss; strict improvement only."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_val_loss = float("inf")
        self.best_epoch: int | None = None
        self.best_state: dict | None = None
        self.epochs_since_improvement = 0

    def update(self, val_loss: float, epoch: int, state: dict | None = None) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            self.best_state = state
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


@dataclass
class EpochLog:
    epoch: int
    train_cls: float
    train_rank: float
    train_total: float
    val_cls: float
    val_rank: float
    val_total: float
    val_accuracy: float
    val_mrr: float
    lambda_used: float
    wall_time: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def deterministic(self) -> dict:
        d = self.to_dict()
        d.pop("wall_time")
        return d


def _split_arrays(split: Dataset):
    if len(split) == 0:
        raise ContractError("cannot run an epoch on an empty split")
    return split.arrays()


def run_epoch(model: RankVqaModel, split: Dataset, cfg: TrainConfig, epoch: int,
              rng: Rng | None, mode: str = "train", state: AdamState | None = None,
              rank_rng: Rng | None = None) -> dict:
    """One pass over ``split``. ``epoch`` is 1-based; the ranking weight uses ``epoch - 1``."""
    visual, text, answers = _split_arrays(split)
    lam_epoch = epoch - 1
    if mode == "validate":
        totals = np.zeros(3)
        scores = []
        for idx in batch_indices(len(split), max(cfg.batch_size, 512)):
            logits = model.logits(visual[idx], text[idx], training=False)
            lb = hybrid_loss(logits, answers[idx], cfg.ranking, cfg.hybrid, lam_epoch, rank_rng)
            totals += len(idx) * np.array([lb.cls, lb.rank, lb.total])
            scores.append(logits.data)
        report = evaluate(np.concatenate(scores), answers)
        cls, rank, total = totals / len(split)
        return {"cls": cls, "rank": rank, "total": total, "accuracy": report.accuracy,
                "mrr": report.mrr, "lambda_used": cfg.hybrid.weight(lam_epoch)}
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'validate', got {mode!r}")
    params = model.parameters()
    if state is None:
        state = AdamState.for_params(params)
    totals = np.zeros(3)
    for idx in batch_indices(len(split), cfg.batch_size, (cfg.shuffle_seed, epoch)):
        logits = model.logits(visual[idx], text[idx], training=True, rng=rng)
        lb = hybrid_loss(logits, answers[idx], cfg.ranking, cfg.hybrid, lam_epoch, rank_rng)
        T.backward(lb.total_tensor)
        adam_step(params, [p.grad for p in params], state, cfg)
        totals += len(idx) * np.array([lb.cls, lb.rank, lb.total])
    cls, rank, total = totals / len(split)
    return {"cls": cls, "rank": rank, "total": total, "lambda_used": cfg.hybrid.weight(lam_epoch)}


@dataclass
class FitResult:
    best_state: dict
    best_epoch: int
    logs: list[EpochLog]
    stopped_early: bool


def fit(model: RankVqaModel, train: Dataset, val: Dataset, cfg: TrainConfig,
        out_dir: str | Path | None = None, keep_epoch_checkpoints: bool = False,
        on_epoch: Callable[[EpochLog], None] | None = None) -> FitResult:
    """Train until ``max_epochs`` or early stop, then restore the best-validation weights."""
    train_ids = {s.id for s in train.samples}
    if any(s.id in train_ids for s in val.samples):
        raise ContractError("train and validation splits overlap")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "w", encoding="utf-8")
    dropout_rng = make_rng(cfg.dropout_seed)
    rank_rng = make_rng(cfg.ranking.seed)
    state = AdamState.for_params(model.parameters())
    stopper = EarlyStopper(cfg.patience)
    logs: list[EpochLog] = []
    stopped = False
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            tr = run_epoch(model, train, cfg, epoch, dropout_rng, "train", state, rank_rng)
            va = run_epoch(model, val, cfg, epoch, None, "validate", rank_rng=rank_rng)
            rec = EpochLog(epoch, tr["cls"], tr["rank"], tr["total"], va["cls"], va["rank"],
                           va["total"], va["accuracy"], va["mrr"], tr["lambda_used"],
                           time.perf_counter() - t0)
            logs.append(rec)
            logger.info("epoch %d train %.4f val %.4f acc %.4f mrr %.4f", epoch, rec.train_total,
                        rec.val_total, rec.val_accuracy, rec.val_mrr)
            if out is not None:
                log_fh.write(json.dumps(rec.to_dict()) + "\n")
                log_fh.flush()
                if keep_epoch_checkpoints:
                    save_checkpoint(model, out / f"epoch_{epoch}.ckpt", {"epoch": epoch})
            if on_epoch is not None:
                on_epoch(rec)
            if stopper.update(rec.val_total, epoch, model.state_dict()):
                stopped = True
                break
    finally:
        if out is not None:
            log_fh.close()
    model.load_state_dict(stopper.best_state)
    if out is not None:
        save_checkpoint(model, out / "best.ckpt", {"epoch": stopper.best_epoch})
    return FitResult(stopper.best_state, stopper.best_epoch, logs, stopped)
