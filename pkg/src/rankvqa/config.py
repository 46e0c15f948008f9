"""Run configuration: one flat JSON object with namespaced keys.

Keys look like ``train.learning_rate`` or ``model.heads``. Precedence is
command-line flags > config file > defaults, and an empty file gives the
reference desk-scale run. Unknown keys are rejected.

All randomness derives from the top-level ``seed``:

====================  ===========
purpose               seed
====================  ===========
synthetic data        seed + 1
weight init           seed + 2
dropout masks         seed + 3
batch shuffling       seed + 4
train/val/test split  seed + 5
sampled negatives     seed + 6
====================  ===========
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError
from .losses import HybridConfig, RankingConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class SplitConfig:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


@dataclass
class PathsConfig:
    dataset: str = ""
    out: str = "runs"


@dataclass
class AblationConfig:
    variants: tuple[str, ...] = ("full", "no_ranking", "no_fusion", "single_head", "baseline")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    min_gap: float = 0.03


@dataclass
class GradcheckConfig:
    seeds: int = 20
    step: float = 1e-5
    tolerance: float = 1e-4
    batch: int = 3


_TRAIN_KEYS = ("learning_rate", "batch_size", "max_epochs", "beta1", "beta2", "epsilon",
               "weight_decay", "patience")
_DATA_SKIP = ("seed",)


def _section_defaults() -> dict[str, dict]:
    model = ModelConfig.desk().to_dict()
    train = {k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS}
    ranking = dataclasses.asdict(RankingConfig())
    ranking.pop("seed")
    data = {k: v for k, v in dataclasses.asdict(SyntheticSpec()).items() if k not in _DATA_SKIP}
    return {
        "model": model,
        "train": train,
        "ranking": ranking,
        "hybrid": dataclasses.asdict(HybridConfig()),
        "data": data,
        "split": dataclasses.asdict(SplitConfig()),
        "paths": dataclasses.asdict(PathsConfig()),
        "ablation": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in dataclasses.asdict(AblationConfig()).items()},
        "gradcheck": dataclasses.asdict(GradcheckConfig()),
    }


def default_flat() -> dict:
    flat = {"seed": 0}
    for section, values in _section_defaults().items():
        for k, v in values.items():
            flat[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
    return flat


@dataclass
class RunConfig:
    values: dict = field(default_factory=default_flat)

    @classmethod
    def resolve(cls, file_values: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        flat = default_flat()
        for source in (file_values or {}), (overrides or {}):
            unknown = sorted(set(source) - set(flat))
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
            for k, v in source.items():
                if v is not None:
                    flat[k] = v
        rc = cls(flat)
        rc.build()  # validates every section eagerly
        return rc

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        file_values = {}
        if path:
            text = Path(path).read_text(encoding="utf-8").strip()
            file_values = json.loads(text) if text else {}
            if not isinstance(file_values, dict):
                raise ConfigError("config file must hold a single JSON object")
        return cls.resolve(file_values, overrides)

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def build(self):
        return (self.model_config(), self.train_config(), self.synthetic_spec(), self.split_config())

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**self.section("model"))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        rk = RankingConfig(seed=self.seed + 6, **self.section("ranking"))
        hy = HybridConfig(**self.section("hybrid"))
        return TrainConfig(seed=self.seed, ranking=rk, hybrid=hy, **self.section("train"))

    def synthetic_spec(self) -> SyntheticSpec:
        spec = SyntheticSpec(seed=self.seed + 1, **self.section("data"))
        spec.validate()
        return spec

    def split_config(self) -> SplitConfig:
        return SplitConfig(**self.section("split"))

    @property
    def split_seed(self) -> int:
        return self.seed + 5

    @property
    def init_seed(self) -> int:
        return self.seed + 2

    def ablation_config(self) -> AblationConfig:
        s = self.section("ablation")
        return AblationConfig(tuple(s["variants"]), tuple(int(x) for x in s["seeds"]), float(s["min_gap"]))

    def gradcheck_config(self) -> GradcheckConfig:
        return GradcheckConfig(**self.section("gradcheck"))

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)
