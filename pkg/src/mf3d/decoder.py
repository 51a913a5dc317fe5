"""Query-point decoder: stacked self-attention + cross-attention blocks.

Query tokens start as positional embeddings of the masked points being
predicted. Every block first lets queries exchange information through
self-attention (skippable for the cross-only ablation), then reads the
encoder's block features through cross-attention, where keys and values
are the block features plus the positional embedding of their centroids.
A shared MLP head maps each token to a normal and a surface variation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import BlockFeatures
from .nn import LayerNorm, Mlp, MultiheadAttention, _nest, count_params
from .rng import Rng
from .tensor import Tensor

ATTENTION_MODES = ("self+cross", "cross-only")
OUT_DIM = 4  # 3 normal components + 1 variation


@dataclass
class DecoderConfig:
    blocks: int = 4
    d_model: int = 96
    heads: int = 4
    query_ratio: float = 1.0
    attention_mode: str = "self+cross"
    bounded_variation: bool = True  # scaled sigmoid onto [0, 1/3] vs raw linear

    def validate(self) -> None:
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if not 0.0 < self.query_ratio <= 1.0:
            raise ValueError("query_ratio must lie in (0, 1]")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


@dataclass
class Prediction:
    normals_hat: Tensor    # (Q, 3) raw head output, consumed by the loss
    variations_hat: Tensor  # (Q, 1)

    def unit_normals(self) -> np.ndarray:
        """Renormalized normals for consumers outside the loss."""
        raw = self.normals_hat.numpy().astype(np.float64)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        return raw / np.where(norms > 0, norms, 1.0)


def select_queries(masked_points: np.ndarray, query_ratio: float, seed: int) -> np.ndarray:
    """Uniform subset of ceil(ratio * |P_M|) masked indices; ratio 1 keeps all."""
    masked_points = np.asarray(masked_points, dtype=np.int64)
    if len(masked_points) == 0:
        raise ValueError("no masked points to query")
    if not 0.0 < query_ratio <= 1.0:
        raise ValueError("query_ratio must lie in (0, 1]")
    if query_ratio == 1.0:
        return masked_points.copy()
    count = int(np.ceil(query_ratio * len(masked_points)))
    pick = Rng(seed).sample(len(masked_points), count)
    return masked_points[np.sort(pick)]


class DecoderBlock:
    def __init__(self, cfg: DecoderConfig, rng: Rng, dtype):
        d = cfg.d_model
        self.use_self = cfg.attention_mode == "self+cross"
        if self.use_self:
            self.ln_self = LayerNorm(d, dtype)
            self.self_attn = MultiheadAttention(d, cfg.heads, rng, dtype)
        self.ln_cross = LayerNorm(d, dtype)
        self.cross_attn = MultiheadAttention(d, cfg.heads, rng, dtype)

    def __call__(self, s: Tensor, memory: Tensor) -> Tensor:
        if self.use_self:
            h = self.ln_self(s)
            s = T.add(s, self.self_attn(h, h))
        return T.add(s, self.cross_attn(self.ln_cross(s), memory))

    def params(self):
        children = {"ln_cross": self.ln_cross, "cross_attn": self.cross_attn}
        if self.use_self:
            children.update({"ln_self": self.ln_self, "self_attn": self.self_attn})
        return _nest(children)


class Decoder:
    def __init__(self, cfg: DecoderConfig, rng: Rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.d_model
        self.pos_mlp = Mlp(3, d, d, rng, dtype, act="gelu")
        self.blocks = [DecoderBlock(cfg, rng, dtype) for _ in range(cfg.blocks)]
        self.ln_final = LayerNorm(d, dtype)
        self.head = Mlp(d, d, OUT_DIM, rng, dtype, act="gelu")

    def decode(self, blocks: BlockFeatures, queries: np.ndarray) -> Prediction:
        if len(blocks) < 1:
            raise ValueError("need at least one block feature pair")
        if blocks.features.shape[-1] != self.cfg.d_model:
            raise ValueError(
                f"encoder width {blocks.features.shape[-1]} != decoder width {self.cfg.d_model}")
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != 3 or len(queries) < 1:
            raise ValueError("queries must be (Q, 3) with Q >= 1")
        pos_q = self.pos_mlp(Tensor(queries.astype(self.dtype)))
        memory = T.add(blocks.features,
                       self.pos_mlp(Tensor(blocks.centroids.astype(self.dtype))))
        s = pos_q
        for block in self.blocks:
            s = block(s, memory)
        out = self.head(self.ln_final(s))
        normals = index_cols(out, (0, 1, 2))
        var_raw = index_cols(out, (3,))
        if self.cfg.bounded_variation:
            variations = T.mul(T.sigmoid(var_raw), 1.0 / 3.0)
        else:
            variations = var_raw
        return Prediction(normals, variations)

    def params(self) -> dict[str, Tensor]:
        children = {"pos_mlp": self.pos_mlp, "ln_final": self.ln_final, "head": self.head}
        children.update({f"blocks.{i}": b for i, b in enumerate(self.blocks)})
        return _nest(children)


def index_cols(x: Tensor, cols) -> Tensor:
    return T.index_select(x, np.asarray(cols, dtype=np.int64), axis=1)


def count_parameters(cfg: DecoderConfig) -> int:
    """Exact trainable-parameter count of a decoder with this configuration."""
    return count_params(Decoder(cfg, Rng(0), np.float32).params())
