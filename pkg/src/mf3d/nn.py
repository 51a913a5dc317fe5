"""Minimal layer library on top of the tensor engine."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: Rng, dtype, std: float = 0.02):
        w = rng.normals((d_in, d_out)) * std
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class LayerNorm:
    def __init__(self, dim: int, dtype, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class Mlp:
    """Two linear layers around one activation."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: Rng, dtype, act: str = "gelu"):
        self.fc1 = Linear(d_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d_out, rng, dtype)
        self.act = {"gelu": T.gelu, "relu": T.relu}[act]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))

    def params(self) -> dict[str, Tensor]:
        return _nest({"fc1": self.fc1, "fc2": self.fc2})


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax(q kᵀ / sqrt(d)) v over the last two axes; returns (context, weights)."""
    dh = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(dh))
    weights = T.softmax_lastdim(scores)
    return T.matmul(weights, v), weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class MultiheadAttention:
    def __init__(self, d_model: int, heads: int, rng: Rng, dtype):
        if d_model % heads:
            raise ValueError("d_model must divide evenly into heads")
        self.heads = heads
        self.d_model = d_model
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)

    def _split(self, x: Tensor, n: int) -> Tensor:
        dh = self.d_model // self.heads
        return T.transpose(T.reshape(x, (n, self.heads, dh)), (1, 0, 2))

    def __call__(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        n, m = x_q.shape[0], x_kv.shape[0]
        q = self._split(self.wq(x_q), n)
        k = self._split(self.wk(x_kv), m)
        v = self._split(self.wv(x_kv), m)
        ctx, _ = scaled_dot_attention(q, k, v)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, self.d_model))
        return self.wo(merged)

    def params(self) -> dict[str, Tensor]:
        return _nest({"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo})


def _nest(children: dict) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name, child in children.items():
        for key, p in child.params().items():
            out[f"{name}.{key}"] = p
    return out


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())
