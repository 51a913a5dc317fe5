"""Masked-feature prediction pipeline: mask -> encode -> decode."""

from __future__ import annotations

import numpy as np

from .decoder import Decoder, DecoderConfig, Prediction, select_queries
from .encoder import Encoder, EncoderConfig
from .masking import MaskSplit, PatchSet
from .rng import Rng
from .tensor import Tensor


class MaskedFeatureModel:
    """Encoder over unmasked patches, decoder over masked-point queries."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                 rng: Rng, dtype=np.float32):
        if dec_cfg.d_model != enc_cfg.d_model:
            raise ValueError("decoder width must match encoder width")
        self.encoder = Encoder(enc_cfg, rng, dtype)
        self.decoder = Decoder(dec_cfg, rng, dtype)
        self.dtype = dtype

    def forward(self, points: np.ndarray, patches: PatchSet, split: MaskSplit,
                query_indices: np.ndarray) -> tuple[Prediction, dict]:
        """Predict features at the query points; returns (prediction, trace).

        The trace records which cloud indices each side of the network read,
        so the masked/unmasked separation can be checked from outside.
        """
        masked_ids = set(split.masked_patch_ids.tolist())
        unmasked_ids = np.array(
            [i for i in range(patches.num_patches) if i not in masked_ids],
            dtype=np.int64)
        block_feats = self.encoder.encode(points, patches, unmasked_ids)

        expected = np.unique(patches.membership[unmasked_ids])
        touched = self.encoder.last_touched
        if not np.array_equal(touched, expected):
            raise AssertionError("encoder read outside the unmasked patch memberships")

        query_indices = np.asarray(query_indices, dtype=np.int64)
        queries = np.asarray(points, dtype=np.float64)[query_indices]
        pred = self.decoder.decode(block_feats, queries)
        trace = {
            "encoder_indices": touched,
            "unmasked_patch_ids": unmasked_ids,
            "query_indices": query_indices,
        }
        return pred, trace

    def run_masked(self, points: np.ndarray, patches: PatchSet, split: MaskSplit,
                   query_ratio: float, query_seed: int) -> tuple[Prediction, dict]:
        queries = select_queries(split.masked_points, query_ratio, query_seed)
        return self.forward(points, patches, split, queries)

    def params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params().items()})
        return out
