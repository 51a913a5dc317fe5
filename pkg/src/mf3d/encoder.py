"""Patch-token transformer encoder emitting block feature pairs.

Each unmasked patch is embedded by a shared per-point MLP with max pooling
(order-independent by construction), gets a learned positional embedding of
its center added, and runs through pre-norm self-attention blocks. The
output pairs each token with its patch center; absolute position enters the
features only through that center embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masking import PatchSet
from .nn import Linear, LayerNorm, Mlp, MultiheadAttention, _nest
from .rng import Rng
from .tensor import Tensor


@dataclass
class EncoderConfig:
    d_model: int = 96
    depth: int = 4
    heads: int = 4
    ffn_mult: int = 4
    patch_embed_hidden: int = 64

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


@dataclass
class BlockFeaturePair:
    feature: np.ndarray
    centroid: np.ndarray


class BlockFeatures:
    """Encoder output: one feature row per block plus its centroid."""

    def __init__(self, features: Tensor, centroids: np.ndarray):
        self.features = features
        self.centroids = np.asarray(centroids)

    def __len__(self) -> int:
        return len(self.centroids)

    def pairs(self) -> list[BlockFeaturePair]:
        data = self.features.numpy()
        return [BlockFeaturePair(data[i].copy(), self.centroids[i].copy())
                for i in range(len(self))]


class EncoderBlock:
    def __init__(self, cfg: EncoderConfig, rng: Rng, dtype):
        d = cfg.d_model
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiheadAttention(d, cfg.heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.ffn = Mlp(d, d * cfg.ffn_mult, d, rng, dtype, act="gelu")

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h))
        return T.add(x, self.ffn(self.ln2(x)))

    def params(self):
        return _nest({"ln1": self.ln1, "attn": self.attn, "ln2": self.ln2, "ffn": self.ffn})


def _exact_centroids(patch_points: np.ndarray) -> np.ndarray:
    """Patch means via exact (fsum) accumulation: permutation-invariant bit-for-bit."""
    p, k, _ = patch_points.shape
    out = np.empty((p, 3), dtype=np.float64)
    for i in range(p):
        for c in range(3):
            out[i, c] = math.fsum(patch_points[i, :, c]) / k
    return out


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: Rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.d_model
        self.patch_mlp = Mlp(3, cfg.patch_embed_hidden, d, rng, dtype, act="relu")
        self.pos_mlp = Mlp(3, d, d, rng, dtype, act="gelu")
        self.blocks = [EncoderBlock(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(d, dtype)
        self.last_touched: np.ndarray | None = None

    def embed_patches(self, patch_points: np.ndarray) -> Tensor:
        """Shared per-point MLP then max pool, after centering on the patch mean."""
        pts = np.asarray(patch_points, dtype=np.float64)
        centered = pts - _exact_centroids(pts)[:, None, :]
        x = Tensor(centered.astype(self.dtype))
        h = self.patch_mlp(x)                       # (P, k, d)
        return T.max_lastdim(T.transpose(h, (0, 2, 1)))  # (P, d)

    def positional_embed(self, points: np.ndarray) -> Tensor:
        return self.pos_mlp(Tensor(np.asarray(points, dtype=self.dtype)))

    def encode(self, cloud_points: np.ndarray, patches: PatchSet,
               patch_ids: np.ndarray) -> BlockFeatures:
        """Run the kept patches through the transformer; one token per patch.

        Records every cloud index read (for the leakage guard).
        """
        patch_ids = np.asarray(patch_ids, dtype=np.int64)
        if len(patch_ids) == 0:
            raise ValueError("need at least one unmasked patch")
        members = patches.membership[patch_ids]
        self.last_touched = np.unique(members)
        pts = np.asarray(cloud_points, dtype=np.float64)
        patch_points = pts[members]
        centers = patches.centers[patch_ids]
        x = T.add(self.embed_patches(patch_points), self.positional_embed(centers))
        for block in self.blocks:
            x = block(x)
        return BlockFeatures(self.ln_final(x), centers.copy())

    def params(self) -> dict[str, Tensor]:
        children = {"patch_mlp": self.patch_mlp, "pos_mlp": self.pos_mlp,
                    "ln_final": self.ln_final}
        children.update({f"blocks.{i}": b for i, b in enumerate(self.blocks)})
        return _nest(children)
