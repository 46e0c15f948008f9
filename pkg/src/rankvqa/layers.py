"""Parameterized layers built on :mod:`rankvqa.tensor`.

All layers act on the last axis, so the same code serves a single
sequence ``[L, d]`` and a batch of sequences ``[B, L, d]``.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Rng, Tensor


def glorot_uniform(fan_out: int, fan_in: int, rng: Rng) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise DimensionError(f"layer dimensions must be positive, got {fan_out}x{fan_in}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Module:
    """Minimal container: subclasses list their children and own parameters."""

    _params: tuple[str, ...] = ()
    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._params:
            yield prefix + name, getattr(self, name)
        for name in self._children:
            child = getattr(self, name)
            if isinstance(child, list):
                for i, c in enumerate(child):
                    yield from c.named_parameters(f"{prefix}{name}.{i}.")
            else:
                yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    _params = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, rng: Rng):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(glorot_uniform(out_features, in_features, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"Linear({self.in_features}->{self.out_features}) got input shape {x.shape}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else T.reshape(x, (-1, self.in_features))
        y = T.add(T.matmul(flat, T.transpose(self.weight)), self.bias)
        return y if x.ndim == 2 else T.reshape(y, lead + (self.out_features,))


class Dropout(Module):
    """Inverted dropout. ``training=False`` is the identity map."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, training: bool, rng: Rng | None) -> Tensor:
        if not training or self.rate == 0.0:
            return x
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        return T.mul(x, keep / (1.0 - self.rate))


def dropout_forward(x: Tensor, d: Dropout, rng: Rng | None, training: bool = True) -> Tensor:
    return d(x, training, rng)


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d_k)) v over the last two axes."""
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1] and q.ndim in (2, 3)):
        raise DimensionError(f"attention: shapes q{q.shape} k{k.shape} v{v.shape} disagree")
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_k))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    _children = ("w_q", "w_k", "w_v", "w_o")

    def __init__(self, d_model: int, heads: int, rng: Rng):
        if heads <= 0 or d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.w_q = Linear(d_model, d_model, rng)
        self.w_k = Linear(d_model, d_model, rng)
        self.w_v = Linear(d_model, d_model, rng)
        self.w_o = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, return_weights: bool = False):
        if x.shape[-1] != self.d_model:
            raise DimensionError(f"mha: expected last dim {self.d_model}, got shape {x.shape}")
        q, k, v = self.w_q(x), self.w_k(x), self.w_v(x)
        outs, weights = [], []
        for h in range(self.heads):
            lo, hi = h * self.d_k, (h + 1) * self.d_k
            if self.heads == 1:
                qh, kh, vh = q, k, v
            else:
                qh, kh, vh = T.slice_cols(q, lo, hi), T.slice_cols(k, lo, hi), T.slice_cols(v, lo, hi)
            o, w = attention(qh, kh, vh, return_weights=True)
            outs.append(o)
            weights.append(w)
        y = self.w_o(outs[0] if self.heads == 1 else T.concat(outs, axis=-1))
        return (y, weights) if return_weights else y


def mha_forward(x: Tensor, p: MultiHeadAttention) -> Tensor:
    return p(x)


class FeedForward(Module):
    """relu(x W1ᵀ + b1) W2ᵀ + b2, row-wise."""

    _children = ("w1", "w2")

    def __init__(self, d_model: int, d_ff: int, rng: Rng):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.relu(self.w1(x)))


def ffn_forward(x: Tensor, p: FeedForward) -> Tensor:
    return p(x)


class Mlp(Module):
    """Linear -> ReLU -> Dropout for each hidden size, then a bare output Linear."""

    _children = ("layers",)

    def __init__(self, in_features: int, hidden: Sequence[int], out_features: int,
                 dropout_rate: float, rng: Rng):
        sizes = [in_features, *hidden, out_features]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.dropout = Dropout(dropout_rate)

    def __call__(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        for layer in self.layers[:-1]:
            x = self.dropout(T.relu(layer(x)), training, rng)
        return self.layers[-1](x)
