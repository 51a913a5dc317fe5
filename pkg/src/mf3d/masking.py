"""Patch construction and masked/unmasked splits.

Patches are the k nearest points around farthest-point-sampled centers.
Masking removes a random subset of whole patches; every point covered by a
masked patch counts as masked, the rest of the cloud as unmasked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng


@dataclass
class PatchSet:
    centers: np.ndarray          # (K, 3) center coordinates
    center_indices: np.ndarray   # (K,) indices into the cloud
    membership: np.ndarray       # (K, k) point indices per patch

    @property
    def num_patches(self) -> int:
        return len(self.center_indices)

    @property
    def patch_size(self) -> int:
        return self.membership.shape[1]


@dataclass
class MaskSplit:
    masked_patch_ids: np.ndarray
    masked_points: np.ndarray    # sorted union of masked patch memberships
    unmasked_points: np.ndarray  # complement over the whole cloud


def farthest_point_sample(points: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Greedy max-min subset: each pick maximizes the distance to the chosen set.

    The first index is drawn uniformly from the seeded stream; distance ties
    resolve to the smallest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= count <= n:
        raise ValueError(f"cannot pick {count} of {n} points")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = Rng(seed).randbelow(n)
    dist = np.einsum("ij,ij->i", pts - pts[chosen[0]], pts - pts[chosen[0]])
    for i in range(1, count):
        nxt = int(np.argmax(dist))  # argmax takes the first maximum: smallest index
        chosen[i] = nxt
        d = np.einsum("ij,ij->i", pts - pts[nxt], pts - pts[nxt])
        np.minimum(dist, d, out=dist)
    return chosen


def knn_indices(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest points per center, Euclidean, ties broken by index."""
    pts = np.asarray(points, dtype=np.float64)
    ctr = np.asarray(centers, dtype=np.float64)
    if k > len(pts):
        raise ValueError(f"k={k} exceeds cloud size {len(pts)}")
    d2 = ((ctr[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def build_patches(points: np.ndarray, num_patches: int, patch_size: int, seed: int) -> PatchSet:
    pts = np.asarray(points, dtype=np.float64)
    center_idx = farthest_point_sample(pts, num_patches, seed)
    membership = knn_indices(pts, pts[center_idx], patch_size)
    return PatchSet(pts[center_idx].copy(), center_idx, membership)


def mask_count(num_patches: int, mask_ratio: float) -> int:
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    return min(math.ceil(mask_ratio * num_patches), num_patches - 1)


def select_mask(patches: PatchSet, mask_ratio: float, seed: int,
                cloud_size: int | None = None) -> MaskSplit:
    """Mask M = min(ceil(mask_ratio * K), K - 1) patches, drawn without replacement."""
    k_patches = patches.num_patches
    m = mask_count(k_patches, mask_ratio)
    ids = np.sort(Rng(seed).sample(k_patches, m))
    masked = np.unique(patches.membership[ids]) if m else np.empty(0, dtype=np.int64)
    if cloud_size is None:
        cloud_size = int(patches.membership.max()) + 1 if patches.membership.size else 0
    in_mask = np.zeros(cloud_size, dtype=bool)
    in_mask[masked] = True
    unmasked = np.nonzero(~in_mask)[0]
    return MaskSplit(ids.astype(np.int64), masked.astype(np.int64), unmasked.astype(np.int64))
