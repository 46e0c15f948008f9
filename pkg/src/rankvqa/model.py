"""The answer-scoring network: modality projectors, self-attention fusion, MLP head.

Three fusion modes are supported:

``token_sequence`` (default)
    Each visual region and the text vector become one token of width
    ``d_model``. The ``R + 1`` tokens go through multi-head self-attention,
    the text-token row is pooled and passed through the position-wise
    feed-forward block, then the MLP head.
``paper_literal``
    Regions are averaged, both modalities are projected to ``d_proj`` and
    concatenated into one token of width ``2 * d_proj``. Attention over a
    single token reduces to ``w_o(w_v(x))``, so ``w_q`` and ``w_k`` never
    influence the output.
``concat``
    Same projections and concatenation as ``paper_literal`` with attention
    removed. Used by the ablation harness.

The logit of answer ``i`` is its candidate score.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, ParseError
from .layers import FeedForward, Linear, Mlp, Module, MultiHeadAttention
from .tensor import Rng, Tensor, make_rng

FUSION_MODES = ("token_sequence", "paper_literal", "concat")
POOLING = ("text", "mean")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    # Widths default to the full-scale values; see ModelConfig.desk() for the reference run.
    d_visual: int = 2048
    d_text: int = 768
    d_proj: int = 1024
    d_model: int = 2048
    heads: int = 8
    d_ff: int | None = None
    mlp_hidden: tuple[int, ...] = (1024, 512, 256)
    n_answers: int = 8
    fusion_mode: str = "token_sequence"
    regions: int = 3
    dropout_rate: float = 0.5
    pooling: str = "text"

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.pooling not in POOLING:
            raise ConfigError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        dims = dict(d_visual=self.d_visual, d_text=self.d_text, d_proj=self.d_proj,
                    d_model=self.d_model, heads=self.heads, n_answers=self.n_answers,
                    regions=self.regions, d_ff=self.ff_width)
        for name, v in dims.items():
            if v < 1:
                raise ConfigError(f"{name} must be positive, got {v}")
        if any(h < 1 for h in self.mlp_hidden):
            raise ConfigError(f"mlp_hidden sizes must be positive, got {self.mlp_hidden}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.fusion_mode in ("paper_literal", "concat") and self.d_model != 2 * self.d_proj:
            raise ConfigError(
                f"{self.fusion_mode} fusion needs d_model == 2*d_proj, got {self.d_model} vs {self.d_proj}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def ff_width(self) -> int:
        return self.d_model if self.d_ff is None else self.d_ff

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(d_visual=32, d_text=16, d_proj=32, d_model=64, heads=4,
                    mlp_hidden=(64, 32), n_answers=8, regions=3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _linear_shapes(name: str, n_in: int, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.weight", (n_out, n_in)), (f"{name}.bias", (n_out,))]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter, in model order, without allocating."""
    width = cfg.d_model if cfg.fusion_mode == "token_sequence" else cfg.d_proj
    shapes = _linear_shapes("visual_proj", cfg.d_visual, width)
    shapes += _linear_shapes("text_proj", cfg.d_text, width)
    if cfg.fusion_mode != "concat":
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes += _linear_shapes(f"fusion.{w}", cfg.d_model, cfg.d_model)
    if cfg.fusion_mode == "token_sequence":
        shapes += _linear_shapes("ffn.w1", cfg.d_model, cfg.ff_width)
        shapes += _linear_shapes("ffn.w2", cfg.ff_width, cfg.d_model)
    sizes = [cfg.d_model, *cfg.mlp_hidden, cfg.n_answers]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes += _linear_shapes(f"head.layers.{i}", a, b)
    return shapes


def config_param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


class RankVqaModel(Module):
    def __init__(self, config: ModelConfig, rng: Rng | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = make_rng(rng)
        self.config = cfg = config
        width = cfg.d_model if cfg.fusion_mode == "token_sequence" else cfg.d_proj
        self.visual_proj = Linear(cfg.d_visual, width, rng)
        self.text_proj = Linear(cfg.d_text, width, rng)
        children = ["visual_proj", "text_proj"]
        if cfg.fusion_mode != "concat":
            self.fusion = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
            children.append("fusion")
        if cfg.fusion_mode == "token_sequence":
            self.ffn = FeedForward(cfg.d_model, cfg.ff_width, rng)
            children.append("ffn")
        self.head = Mlp(cfg.d_model, cfg.mlp_hidden, cfg.n_answers, cfg.dropout_rate, rng)
        children.append("head")
        self._children = tuple(children)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ContractError(f"state keys differ: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def fuse(self, visual: np.ndarray, text: np.ndarray) -> Tensor:
        """Pooled joint representation, shape ``[B, d_model]``."""
        cfg = self.config
        visual = np.asarray(visual, dtype=np.float64)
        text = np.asarray(text, dtype=np.float64)
        if visual.ndim != 3 or text.ndim != 2 or visual.shape[0] != text.shape[0]:
            raise DimensionError(
                f"expected visual [B, R, {cfg.d_visual}] and text [B, {cfg.d_text}], "
                f"got {visual.shape} and {text.shape}")
        if visual.shape[2] != cfg.d_visual or text.shape[1] != cfg.d_text:
            raise DimensionError(
                f"feature widths {visual.shape[2]}/{text.shape[1]} do not match "
                f"config {cfg.d_visual}/{cfg.d_text}")
        B = visual.shape[0]
        if cfg.fusion_mode == "token_sequence":
            R = visual.shape[1]
            if R != cfg.regions:
                raise DimensionError(f"expected {cfg.regions} regions, got {R}")
            tokens = T.concat([self.visual_proj(Tensor(visual)),
                               T.reshape(self.text_proj(Tensor(text)), (B, 1, cfg.d_model))], axis=1)
            y = self.fusion(tokens)
            if cfg.pooling == "text":
                # the feed-forward block is position-wise, so only the pooled row needs it
                return self.ffn(T.index(y, (slice(None), R)))
            return T.mean(self.ffn(y), axis=1)
        x = T.concat([self.visual_proj(Tensor(visual.mean(axis=1))),
                      self.text_proj(Tensor(text))], axis=-1)
        if cfg.fusion_mode == "concat":
            return x
        y = self.fusion(T.reshape(x, (B, 1, cfg.d_model)))
        return T.reshape(y, (B, cfg.d_model))

    def logits(self, visual: np.ndarray, text: np.ndarray, training: bool = False,
               rng: Rng | None = None) -> Tensor:
        return self.head(self.fuse(visual, text), training, rng)


def stack_samples(samples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise ContractError("empty batch")
    shapes = {(np.shape(s.visual), np.shape(s.text)) for s in samples}
    if len(shapes) != 1:
        raise DimensionError(f"ragged batch: feature shapes {sorted(shapes)}")
    return (np.stack([s.visual for s in samples]).astype(np.float64),
            np.stack([s.text for s in samples]).astype(np.float64))


def forward(m: RankVqaModel, visual, text, training: bool = False, rng: Rng | None = None) -> Tensor:
    """Scores for one sample: visual ``[R, d_visual]``, text ``[d_text]`` -> ``[A]``."""
    visual = np.asarray(visual, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if visual.ndim != 2 or text.ndim != 1:
        raise DimensionError(f"expected visual [R, d] and text [d], got {visual.shape} and {text.shape}")
    return T.index(m.logits(visual[None], text[None], training, rng), 0)


def forward_batch(m: RankVqaModel, samples: Sequence, training: bool = False,
                  rng: Rng | None = None) -> Tensor:
    visual, text = stack_samples(samples)
    return m.logits(visual, text, training, rng)


def count_params(m: RankVqaModel) -> int:
    return sum(p.size for p in m.parameters())


def summary(cfg: ModelConfig) -> str:
    lines = [f"fusion_mode={cfg.fusion_mode} heads={cfg.heads} d_model={cfg.d_model}"]
    for name, shape in param_shapes(cfg):
        lines.append(f"  {name:<24} {'x'.join(map(str, shape))}")
    lines.append(f"total parameters: {config_param_count(cfg)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(m: RankVqaModel, path, meta: dict | None = None) -> None:
    """JSON header line followed by raw little-endian float64 data in header order."""
    named = list(m.named_parameters())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": m.config.to_dict(),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError(1, "checkpoint header is not newline-terminated")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(1, f"bad checkpoint header: {exc}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(1, f"unsupported checkpoint version {header.get('format_version')!r}")
    body = raw[nl + 1:]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in header["params"]]
    expected = 8 * sum(sizes)
    if len(body) != expected:
        raise ParseError(2, f"checkpoint data is {len(body)} bytes, header describes {expected}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    state, off = {}, 0
    for entry, n in zip(header["params"], sizes):
        state[entry["name"]] = flat[off:off + n].reshape(entry["shape"]).copy()
        off += n
    return header, state


def load_checkpoint(path) -> RankVqaModel:
    header, state = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    m = RankVqaModel(cfg, make_rng(0))
    expected = [(n, tuple(p.shape)) for n, p in m.named_parameters()]
    got = [(e["name"], tuple(e["shape"])) for e in header["params"]]
    if expected != got:
        raise ParseError(1, "checkpoint parameter list does not match its config")
    m.load_state_dict(state)
    return m
