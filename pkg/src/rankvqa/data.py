"""Feature datasets: a synthetic cross-modal task, JSON-lines I/O, splits, batching.

In the synthetic task each sample has a hidden concept ``c`` (visible only
in one randomly placed visual region) and a question type ``t`` (visible
only in the text vector). The answer is ``lookup[c][t]``, a random table
with no constant rows or columns, so neither modality alone determines it.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, GenerationError, ParseError
from .tensor import make_rng

MAX_RETRIES = 1000


@dataclass
class Sample:
    id: str
    visual: np.ndarray  # [R, d_visual]
    text: np.ndarray  # [d_text]
    answer: int

    def to_dict(self) -> dict:
        return {"id": self.id, "visual": self.visual.tolist(), "text": self.text.tolist(),
                "answer": int(self.answer)}


@dataclass
class Dataset:
    samples: list[Sample]
    meta: dict

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def answers(self) -> np.ndarray:
        return np.array([s.answer for s in self.samples], dtype=np.int64)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.stack([s.visual for s in self.samples]),
                np.stack([s.text for s in self.samples]), self.answers)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], dict(self.meta))


@dataclass
class SyntheticSpec:
    n_concepts: int = 4
    n_question_types: int = 4
    n_answers: int = 8
    regions: int = 3
    noise_sigma: float = 0.25
    d_visual: int = 32
    d_text: int = 16
    n_samples: int = 4000
    seed: int = 1
    # Shared offset that marks the signal region, and the spread of concept-specific parts.
    salience: float = 3.0
    prototype_scale: float = 0.35

    def validate(self) -> None:
        C, Tq, A = self.n_concepts, self.n_question_types, self.n_answers
        if not C * Tq >= A >= 2:
            raise ConfigError(f"need n_concepts*n_question_types >= n_answers >= 2, got {C}*{Tq}, {A}")
        if C < 2 or Tq < 2:
            raise ConfigError("need at least two concepts and two question types")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if min(self.regions, self.d_visual, self.d_text, self.n_samples) < 1:
            raise ConfigError("regions, widths and n_samples must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _lookup_table(C: int, Tq: int, A: int, rng) -> np.ndarray:
    for _ in range(MAX_RETRIES):
        cells = np.concatenate([np.arange(A), rng.integers(0, A, size=C * Tq - A)])
        g = rng.permutation(cells).reshape(C, Tq)
        rows_ok = all(len(set(r)) > 1 for r in g)
        cols_ok = all(len(set(c)) > 1 for c in g.T)
        if rows_ok and cols_ok:
            return g
    raise GenerationError("could not draw a lookup table without constant rows/columns")


def _separated(points: np.ndarray, min_dist: float) -> bool:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return bool(d.min() >= min_dist) and bool(d.min() > 0)


def _prototypes(n: int, dim: int, scale: float, offset: np.ndarray, min_dist: float, rng) -> np.ndarray:
    for _ in range(MAX_RETRIES):
        p = offset + scale * rng.standard_normal((n, dim))
        if _separated(p, min_dist):
            return p
    raise GenerationError(f"could not place {n} prototypes at pairwise distance >= {min_dist}")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed)
    C, Tq, A, R, sigma = (spec.n_concepts, spec.n_question_types, spec.n_answers,
                          spec.regions, spec.noise_sigma)
    lookup = _lookup_table(C, Tq, A, rng)
    u = rng.standard_normal(spec.d_visual)
    u /= np.linalg.norm(u)
    concept_protos = _prototypes(C, spec.d_visual, spec.prototype_scale, spec.salience * u,
                                 4 * sigma, rng)
    type_protos = _prototypes(Tq, spec.d_text, 1.0, np.zeros(spec.d_text), 4 * sigma, rng)

    samples = []
    width = len(str(spec.n_samples - 1))
    for i in range(spec.n_samples):
        c = int(rng.integers(C))
        t = int(rng.integers(Tq))
        pos = int(rng.integers(R))
        visual = rng.standard_normal((R, spec.d_visual))
        visual[pos] = concept_protos[c] + sigma * rng.standard_normal(spec.d_visual)
        text = type_protos[t] + sigma * rng.standard_normal(spec.d_text)
        samples.append(Sample(f"s{i:0{width}d}", visual, text, int(lookup[c, t])))

    meta = {
        "d_visual": spec.d_visual, "d_text": spec.d_text, "regions": R, "n_answers": A,
        "generator": spec.to_dict(),
        "lookup": lookup.tolist(),
        "concept_prototypes": concept_protos.tolist(),
        "type_prototypes": type_protos.tolist(),
    }
    return Dataset(samples, meta)


def nearest_prototype_accuracy(d: Dataset) -> float:
    """Decode each sample with the stored prototypes and lookup; fraction answered correctly."""
    lookup = np.asarray(d.meta["lookup"])
    cp = np.asarray(d.meta["concept_prototypes"])
    tp = np.asarray(d.meta["type_prototypes"])
    hits = 0
    for s in d.samples:
        dv = ((s.visual[:, None, :] - cp[None, :, :]) ** 2).sum(-1)  # [R, C]
        c = int(np.unravel_index(np.argmin(dv), dv.shape)[1])
        t = int(np.argmin(((tp - s.text) ** 2).sum(-1)))
        hits += int(lookup[c, t] == s.answer)
    return hits / len(d.samples)


# ------------------------------------------------------------------------ I/O


def dumps_dataset(d: Dataset) -> str:
    lines = [json.dumps(d.meta, sort_keys=True)]
    lines += [json.dumps(s.to_dict()) for s in d.samples]
    return "\n".join(lines) + "\n"


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(d), encoding="utf-8")


def _validate_meta(meta, line: int) -> None:
    if not isinstance(meta, dict):
        raise ParseError(line, "meta line must be a JSON object")
    for key in ("d_visual", "d_text", "regions", "n_answers"):
        if not isinstance(meta.get(key), int) or meta[key] < 1:
            raise ParseError(line, f"meta field {key!r} must be a positive integer")


def _parse_sample(obj, meta: dict, line: int) -> Sample:
    if not isinstance(obj, dict) or set(obj) != {"id", "visual", "text", "answer"}:
        raise ParseError(line, "sample must be an object with keys id, visual, text, answer")
    try:
        visual = np.array(obj["visual"], dtype=np.float64)
        text = np.array(obj["text"], dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(line, "visual/text must be numeric arrays") from None
    if visual.shape != (meta["regions"], meta["d_visual"]):
        raise ParseError(line, f"visual shape {visual.shape} != ({meta['regions']}, {meta['d_visual']})")
    if text.shape != (meta["d_text"],):
        raise ParseError(line, f"text shape {text.shape} != ({meta['d_text']},)")
    if not (np.isfinite(visual).all() and np.isfinite(text).all()):
        raise ParseError(line, "non-finite feature value")
    ans = obj["answer"]
    if not isinstance(ans, int) or isinstance(ans, bool) or not 0 <= ans < meta["n_answers"]:
        raise ParseError(line, f"answer {ans!r} outside [0, {meta['n_answers']})")
    if not isinstance(obj["id"], str):
        raise ParseError(line, "id must be a string")
    return Sample(obj["id"], visual, text, ans)


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(1, "empty dataset file")
    parsed = []
    for i, raw in enumerate(lines, start=1):
        try:
            parsed.append(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise ParseError(i, f"malformed JSON ({exc.msg})") from None
    meta = parsed[0]
    _validate_meta(meta, 1)
    samples = [_parse_sample(obj, meta, i) for i, obj in enumerate(parsed[1:], start=2)]
    return Dataset(samples, meta)


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------ split / batches


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ContractError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ContractError(f"split of {n} samples by {tuple(fractions)} leaves an empty part")
    return n_train, n_val, n_test


def split(d: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    n_train, n_val, _ = split_sizes(len(d), fractions)
    order = make_rng(seed).permutation(len(d))
    return (d.subset(order[:n_train]), d.subset(order[n_train:n_train + n_val]),
            d.subset(order[n_train + n_val:]))


def batches(d: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[list[Sample]]:
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    for idx in batch_indices(len(d), batch_size, shuffle_seed):
        yield [d.samples[i] for i in idx]


def batch_indices(n: int, batch_size: int, shuffle_seed=None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n) if shuffle_seed is None else make_rng(shuffle_seed).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]
