"""Ablation harness and the finite-difference gradient-check runner."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, split
from .errors import ConfigError, ContractError
from .losses import HybridConfig, RankingConfig, evaluate, hybrid_loss
from .model import ModelConfig, RankVqaModel
from .tensor import finite_diff_grad, make_rng, relative_error
from .training import TrainConfig, fit

VARIANTS = ("full", "no_ranking", "no_fusion", "single_head", "baseline")
VARIANT_LABELS = {
    "full": "Full model",
    "no_ranking": "Without ranking-based training",
    "no_fusion": "Without multimodal fusion",
    "single_head": "Without multi-head attention (h=1)",
    "baseline": "Baseline (concatenation, no ranking)",
}
INTERPRETATION = ("'basic attention' is realized as single-head attention (h=1); "
                  "'no fusion' projects, concatenates and feeds the MLP with attention removed")


def variant_configs(variant: str, model_cfg: ModelConfig,
                    hybrid: HybridConfig) -> tuple[ModelConfig, HybridConfig]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    m, h = model_cfg, hybrid
    if variant in ("no_ranking", "baseline"):
        h = dataclasses.replace(h, lambda_rank=0.0)
    if variant in ("no_fusion", "baseline"):
        m = dataclasses.replace(m, fusion_mode="concat", d_model=2 * m.d_proj)
    if variant == "single_head":
        m = dataclasses.replace(m, heads=1)
    return m, h


@dataclass
class RunResult:
    variant: str
    seed: int
    accuracy: float
    mrr: float
    best_epoch: int
    epochs: int


@dataclass
class AblationReport:
    variants: list[str]
    seeds: list[int]
    runs: list[RunResult]
    split_checksum: str
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    verdicts: list[dict] = field(default_factory=list)
    min_gap: float = 0.0
    gap: dict | None = None
    interpretation: str = INTERPRETATION

    @property
    def passed(self) -> bool:
        ok = all(v["holds"] for v in self.verdicts)
        return ok and (self.gap is None or self.gap["holds"])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [("Model", "Accuracy", "MRR")]
        for v in self.variants:
            s = self.summary[v]
            rows.append((VARIANT_LABELS[v], f"{s['acc_mean']:.4f} ± {s['acc_std']:.4f}",
                         f"{s['mrr_mean']:.4f} ± {s['mrr_std']:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append("")
        lines.append(f"seeds: {self.seeds}   split checksum: {self.split_checksum[:16]}")
        for v in self.verdicts:
            lines.append(f"[{'ok' if v['holds'] else 'FAIL'}] {v['claim']}")
        if self.gap is not None:
            lines.append(f"[{'ok' if self.gap['holds'] else 'FAIL'}] {self.gap['claim']}")
        lines.append(f"note: {self.interpretation}")
        return "\n".join(lines)


def split_checksum(parts: Sequence[Dataset]) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(",".join(s.id for s in part.samples).encode())
        h.update(b"|")
    return h.hexdigest()


def _ordering_verdicts(variants: Sequence[str], summary: dict) -> list[dict]:
    def claim(a, b):
        ma, mb = summary[a]["acc_mean"], summary[b]["acc_mean"]
        return {"claim": f"{a} >= {b} (mean accuracy {ma:.4f} vs {mb:.4f})", "holds": bool(ma >= mb)}

    out = []
    middle = [v for v in variants if v not in ("full", "baseline")]
    if "full" in variants:
        out += [claim("full", v) for v in middle]
    if "baseline" in variants:
        out += [claim(v, "baseline") for v in middle]
    if "full" in variants and "baseline" in variants:
        out.append(claim("full", "baseline"))
    return out


def run_ablation(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 variants: Sequence[str] = VARIANTS, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                 fractions=(0.8, 0.1, 0.1), split_seed: int = 0, min_gap: float = 0.03,
                 progress: Callable[[RunResult], None] | None = None) -> AblationReport:
    """Train every (variant, seed) pair on one shared split and compare test metrics.

    Per run seed ``s``: weights are initialized from ``s + 2``; dropout and
    shuffling use the derivations in :class:`TrainConfig` with ``seed = s``.
    """
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    if not variants or not seeds:
        raise ContractError("need at least one variant and one seed")
    train, val, test = split(dataset, fractions, split_seed)
    checksum = split_checksum((train, val, test))
    tv, tt, ty = test.arrays()
    runs = []
    for v in variants:
        mcfg, hcfg = variant_configs(v, model_cfg, train_cfg.hybrid)
        for s in seeds:
            tcfg = dataclasses.replace(train_cfg, seed=s, hybrid=hcfg)
            model = RankVqaModel(mcfg, make_rng(s + 2))
            res = fit(model, train, val, tcfg)
            rep = evaluate(model.logits(tv, tt).data, ty)
            run = RunResult(v, s, rep.accuracy, rep.mrr, res.best_epoch, len(res.logs))
            runs.append(run)
            if progress is not None:
                progress(run)
    summary = {}
    for v in variants:
        accs = [r.accuracy for r in runs if r.variant == v]
        mrrs = [r.mrr for r in runs if r.variant == v]
        summary[v] = {
            "acc_mean": statistics.fmean(accs), "acc_std": statistics.pstdev(accs),
            "mrr_mean": statistics.fmean(mrrs), "mrr_std": statistics.pstdev(mrrs),
        }
    gap = None
    if "full" in variants and "baseline" in variants:
        diff = summary["full"]["acc_mean"] - summary["baseline"]["acc_mean"]
        gap = {"claim": f"full - baseline = {diff:.4f} >= {min_gap}", "holds": bool(diff >= min_gap),
               "value": diff}
    return AblationReport(variants, list(seeds), runs, checksum, summary,
                          _ordering_verdicts(variants, summary), min_gap, gap)


# ------------------------------------------------------------------ gradcheck


TINY_CONFIG = dict(d_visual=6, d_text=4, d_proj=4, d_model=8, heads=2, mlp_hidden=(8,),
                   n_answers=3, regions=2)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_CONFIG, **overrides})


@dataclass
class GradcheckEntry:
    config: str
    seed: int
    parameter: str
    max_rel_error: float
    analytic_max_abs: float
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    entries: list[GradcheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def per_layer(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            layer = e.parameter.rsplit(".", 1)[0]
            out[layer] = max(out.get(layer, 0.0), e.max_rel_error)
        return out

    def failing_layers(self) -> list[str]:
        return sorted({e.parameter.rsplit(".", 1)[0] for e in self.entries if not e.passed})

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "passed": self.passed, "per_layer": self.per_layer(),
                "entries": [dataclasses.asdict(e) for e in self.entries]}

    def text(self) -> str:
        lines = [f"{'layer':<28} max rel error"]
        for layer, err in self.per_layer().items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            lines.append(f"{layer:<28} {err:.3e}  {flag}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def gradcheck_batch(cfg: ModelConfig, rng, batch: int = 3):
    visual = rng.standard_normal((batch, cfg.regions, cfg.d_visual))
    text = rng.standard_normal((batch, cfg.d_text))
    targets = rng.integers(0, cfg.n_answers, size=batch)
    return visual, text, targets


def gradcheck_model(model: RankVqaModel, visual, text, targets, rcfg: RankingConfig | None = None,
                    hcfg: HybridConfig | None = None, h: float = 1e-5, tolerance: float = 1e-4,
                    dropout_seed: int = 0, label: str = "", seed: int = 0) -> list[GradcheckEntry]:
    """Compare backward() with central differences for every parameter on the hybrid loss.

    Training-mode dropout is included; each evaluation redraws the same mask
    from ``dropout_seed`` so the objective is a fixed function of the weights.
    """
    def loss():
        logits = model.logits(visual, text, training=True, rng=make_rng(dropout_seed))
        return hybrid_loss(logits, targets, rcfg, hcfg, 0, make_rng(dropout_seed + 1)).total_tensor

    model.zero_grad()
    T.backward(loss())
    entries = []
    for name, p in model.named_parameters():
        analytic = p.grad.copy()
        numeric = finite_diff_grad(lambda _: loss(), p, h).data
        err = relative_error(analytic, numeric)
        entries.append(GradcheckEntry(label, seed, name, err, float(np.abs(analytic).max()),
                                      err <= tolerance))
    model.zero_grad()
    return entries


def run_gradcheck(configs: Sequence[ModelConfig] | None = None, seeds: Sequence[int] = range(20),
                  rcfg: RankingConfig | None = None, hcfg: HybridConfig | None = None,
                  h: float = 1e-5, tolerance: float = 1e-4, batch: int = 3) -> GradcheckReport:
    configs = list(configs) if configs is not None else [tiny_config()]
    rcfg = rcfg or RankingConfig()
    entries = []
    for ci, cfg in enumerate(configs):
        label = f"{ci}:{cfg.fusion_mode}/h={cfg.heads}"
        for s in seeds:
            rng = make_rng((s, 17))
            model = RankVqaModel(cfg, rng)
            visual, text, targets = gradcheck_batch(cfg, rng, batch)
            entries += gradcheck_model(model, visual, text, targets, rcfg, hcfg, h, tolerance,
                                       dropout_seed=s + 3, label=label, seed=s)
    return GradcheckReport(tolerance, entries)
