"""Local-PCA target features for dense point sets.

The per-point features are derived from the covariance of offsets to the
neighbors inside a radius-r ball: the normal is the eigenvector of the
smallest eigenvalue, the surface variation is lambda_1 / (lambda_1 +
lambda_2 + lambda_3) with ascending eigenvalues, which lives in [0, 1/3].
Normal signs are made consistent by propagating along a minimum spanning
tree of the k-NN graph, seeded at the highest point of each component.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .cloud_io import PointCloud

DEFAULT_RADIUS = 0.1
DEFAULT_NEIGHBOR_POOL = 128
DEFAULT_MIN_NEIGHBORS = 8
DEFAULT_ORIENT_K = 12

# Relative eigenvalue gap below which the smallest eigenspace is treated as
# degenerate (isotropic neighborhood).
DEGENERATE_GAP = 1e-10


@dataclass
class EigenDecomp3:
    """Ascending eigenvalues with orthonormal eigenvectors as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass
class NormalEstimate:
    vector: np.ndarray
    degenerate: bool


@dataclass
class TargetFeatures:
    normals: np.ndarray
    variations: np.ndarray


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Shift the bounding-box center to the origin and scale into the unit sphere."""
    pts = np.asarray(points, dtype=np.float64)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    shifted = pts - center
    radius = np.linalg.norm(shifted, axis=1).max()
    if radius == 0:
        return shifted
    return shifted / radius


def local_covariance(dense: np.ndarray, p: np.ndarray, radius: float,
                     min_neighbors: int = DEFAULT_MIN_NEIGHBORS) -> np.ndarray:
    """Mean outer product of (p - x) over the neighbors x within the r-ball.

    Falls back to the nearest min_neighbors points when the ball is too empty.
    """
    dense = np.asarray(dense, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(dense) < min_neighbors:
        raise ValueError(f"dense cloud has {len(dense)} < {min_neighbors} points")
    offsets = p[None, :] - dense
    d2 = np.einsum("ij,ij->i", offsets, offsets)
    inside = d2 <= radius * radius
    if inside.sum() < min_neighbors:
        order = np.argsort(d2, kind="stable")[:min_neighbors]
        sel = offsets[order]
    else:
        sel = offsets[inside]
    return sel.T @ sel / len(sel)


def _covariances_from_pool(points: np.ndarray, dense: np.ndarray, dist: np.ndarray,
                           idx: np.ndarray, radius: float, min_neighbors: int) -> np.ndarray:
    """Batched covariance over (pool k-NN) intersected with the r-ball."""
    keep = dist <= radius
    short = keep.sum(axis=1) < min_neighbors
    if short.any():
        # pool indices arrive sorted by distance, so the first columns are
        # exactly the nearest-min_neighbors fallback
        fallback = np.zeros_like(keep)
        fallback[:, :min_neighbors] = True
        keep[short] = fallback[short]
    w = keep.astype(np.float64)
    offsets = (points[:, None, :] - dense[idx]) * w[:, :, None]
    cov = np.einsum("qki,qkj->qij", offsets, offsets)
    return cov / w.sum(axis=1)[:, None, None]


def _eigvals3(mats: np.ndarray) -> np.ndarray:
    """Closed-form (trigonometric) eigenvalues of symmetric 3x3 matrices, ascending."""
    a00, a11, a22 = mats[:, 0, 0], mats[:, 1, 1], mats[:, 2, 2]
    a01, a02, a12 = mats[:, 0, 1], mats[:, 0, 2], mats[:, 1, 2]
    p1 = a01**2 + a02**2 + a12**2
    q = (a00 + a11 + a22) / 3.0
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2 / 6.0, 0.0))
    vals = np.empty((len(mats), 3), dtype=np.float64)
    diag_like = p <= 0
    if diag_like.any():
        vals[diag_like] = np.sort(np.stack([a00, a11, a22], axis=1)[diag_like], axis=1)
    gen = ~diag_like
    if gen.any():
        pg = p[gen]
        b = (mats[gen] - q[gen, None, None] * np.eye(3)) / pg[:, None, None]
        r = np.linalg.det(b) / 2.0
        r = np.clip(r, -1.0, 1.0)
        phi = np.arccos(r) / 3.0
        hi = q[gen] + 2.0 * pg * np.cos(phi)
        lo = q[gen] + 2.0 * pg * np.cos(phi + 2.0 * np.pi / 3.0)
        mid = 3.0 * q[gen] - hi - lo
        vals[gen] = np.stack([lo, mid, hi], axis=1)
    return vals


def _eigvec_for(mats: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvector per matrix via the largest cross product of rows of A - lam*I.

    Returns (vectors, ok) where ok is False when the eigenspace looks degenerate.
    """
    m = mats - lam[:, None, None] * np.eye(3)
    c01 = np.cross(m[:, 0], m[:, 1])
    c02 = np.cross(m[:, 0], m[:, 2])
    c12 = np.cross(m[:, 1], m[:, 2])
    cand = np.stack([c01, c02, c12], axis=1)
    norms = np.linalg.norm(cand, axis=2)
    best = norms.argmax(axis=1)
    vec = cand[np.arange(len(mats)), best]
    bestnorm = norms[np.arange(len(mats)), best]
    scale = np.maximum(np.abs(mats).max(axis=(1, 2)), 1.0)
    ok = bestnorm > 1e-12 * scale * scale
    safe = np.where(bestnorm > 0, bestnorm, 1.0)
    return vec / safe[:, None], ok


def _jacobi3(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi diagonalization for one symmetric 3x3 matrix."""
    a = a.astype(np.float64).copy()
    v = np.eye(3)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(50):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= 1e-15 * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    vals = np.diag(a).copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], v[:, order]


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Pick the lexicographically larger of {v, -v} per eigenvector column."""
    for c in range(vecs.shape[2]):
        v = vecs[:, :, c]
        s = np.where(v[:, 0] != 0, np.sign(v[:, 0]),
                     np.where(v[:, 1] != 0, np.sign(v[:, 1]),
                              np.where(v[:, 2] != 0, np.sign(v[:, 2]), 1.0)))
        vecs[:, :, c] = v * s[:, None]
    return vecs


def eigh3_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decompose a batch of symmetric 3x3 matrices.

    Closed-form path with a Jacobi fallback for near-degenerate spectra;
    eigenvalues ascending, eigenvectors orthonormal columns with a
    deterministic sign.
    """
    mats = np.asarray(mats, dtype=np.float64)
    single = mats.ndim == 2
    if single:
        mats = mats[None]
    if not np.isfinite(mats).all():
        raise ValueError("non-finite matrix entries")
    mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    vals = _eigvals3(mats)
    v1, ok1 = _eigvec_for(mats, vals[:, 0])
    v3, ok3 = _eigvec_for(mats, vals[:, 2])
    v2 = np.cross(v3, v1)
    n2 = np.linalg.norm(v2, axis=1)
    ok2 = n2 > 1e-8
    v2 = v2 / np.where(n2 > 0, n2, 1.0)[:, None]
    v1 = np.cross(v2, v3)
    vecs = np.stack([v1, v2, v3], axis=2)

    recon = np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)
    norm = np.maximum(1.0, np.sqrt((mats * mats).sum(axis=(1, 2))))
    resid = np.abs(recon - mats).max(axis=(1, 2))
    bad = ~(ok1 & ok2 & ok3) | (resid > 1e-9 * norm)
    for i in np.nonzero(bad)[0]:
        vals[i], vecs[i] = _jacobi3(mats[i])
    vecs = _fix_signs(vecs)
    if single:
        return vals[0], vecs[0]
    return vals, vecs


def eigh3(c: np.ndarray) -> EigenDecomp3:
    vals, vecs = eigh3_batch(np.asarray(c, dtype=np.float64))
    return EigenDecomp3(vals, vecs)


def estimate_normal(decomp: EigenDecomp3) -> NormalEstimate:
    """Unit eigenvector of the smallest eigenvalue; sign undetermined.

    Flags the result degenerate when the smallest eigenspace is (nearly)
    repeated, in which case the deterministic tie-break vector is returned.
    """
    lam = decomp.eigenvalues
    scale = max(1.0, abs(float(lam[2])))
    degenerate = (lam[1] - lam[0]) <= DEGENERATE_GAP * scale
    return NormalEstimate(decomp.eigenvectors[:, 0].copy(), bool(degenerate))


def surface_variation(decomp: EigenDecomp3) -> float:
    """lambda_1 / (lambda_1 + lambda_2 + lambda_3), clamped into [0, 1/3]."""
    lam = np.asarray(decomp.eigenvalues, dtype=np.float64)
    if not np.isfinite(lam).all():
        raise ValueError("non-finite eigenvalues")
    lam = np.maximum(lam, 0.0)
    total = lam.sum()
    if total <= 1e-18:
        return 0.0
    return float(lam[0] / total)


def _variations_batch(vals: np.ndarray) -> np.ndarray:
    lam = np.maximum(vals, 0.0)
    total = lam.sum(axis=1)
    out = np.zeros(len(lam))
    nz = total > 1e-18
    out[nz] = lam[nz, 0] / total[nz]
    return out


def _unique_edges(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected unique (i < j) edge list from a k-NN index table."""
    n, k = idx.shape
    src = np.repeat(np.arange(n), k)
    dst = idx.reshape(-1)
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    good = lo != hi
    packed = np.unique(lo[good].astype(np.int64) * n + hi[good])
    return packed // n, packed % n


def orient_normals(cloud: PointCloud, k: int = DEFAULT_ORIENT_K) -> PointCloud:
    """Assign consistent normal signs by spanning-tree propagation.

    Edge weight is 1 - |n_i . n_j| on the k-NN graph; each connected
    component is seeded at its highest point, whose normal is forced to a
    nonnegative z component, and signs flip along tree edges whenever
    neighboring normals disagree.
    """
    if cloud.normals is None:
        raise ValueError("cloud has no normals to orient")
    if k < 2:
        raise ValueError("need k >= 2")
    pts = np.asarray(cloud.points, dtype=np.float64)
    normals = np.asarray(cloud.normals, dtype=np.float64).copy()
    n = len(pts)
    if n == 1:
        if normals[0, 2] < 0:
            normals[0] = -normals[0]
        return PointCloud(pts, normals, cloud.variations)
    kk = min(k, n - 1)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=kk + 1)
    rows, cols = _unique_edges(np.asarray(idx)[:, 1:])
    # +1 keeps every weight positive: zero entries vanish from sparse graphs,
    # and a constant shift preserves the spanning tree
    weights = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1.0
    graph = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))
    n_comp, labels = csgraph.connected_components(graph, directed=False)
    if n_comp > 1:
        warnings.warn(f"k-NN graph has {n_comp} components; orienting each independently")
    mst = csgraph.minimum_spanning_tree(graph)
    for comp in range(n_comp):
        members = np.nonzero(labels == comp)[0]
        seed = members[np.argmax(pts[members, 2])]
        if normals[seed, 2] < 0:
            normals[seed] = -normals[seed]
        order, pred = csgraph.breadth_first_order(mst, seed, directed=False,
                                                  return_predecessors=True)
        for node in order[1:]:
            if normals[node] @ normals[pred[node]] < 0:
                normals[node] = -normals[node]
    lengths = np.linalg.norm(normals, axis=1)
    normals = normals / np.where(lengths > 0, lengths, 1.0)[:, None]
    return PointCloud(pts, normals, cloud.variations)


def compute_targets(dense: np.ndarray, query_points: np.ndarray,
                    radius: float = DEFAULT_RADIUS,
                    neighbor_pool: int = DEFAULT_NEIGHBOR_POOL,
                    min_neighbors: int = DEFAULT_MIN_NEIGHBORS,
                    orient_k: int = DEFAULT_ORIENT_K,
                    workers: int = 1) -> TargetFeatures:
    """Per-query normal and surface variation against a dense sampling.

    The neighborhood per point is the neighbor_pool nearest dense points
    intersected with the radius ball (nearest-min_neighbors fallback).
    Signs come from orienting the dense cloud and copying the agreement of
    each query with its nearest dense point. The dense cloud is expected in
    the unit-sphere normalization that makes the default radius meaningful.
    """
    dense = np.asarray(dense, dtype=np.float64)
    queries = np.asarray(query_points, dtype=np.float64)
    pool = min(neighbor_pool, len(dense))
    tree = cKDTree(dense)

    dist_d, idx_d = tree.query(dense, k=pool, workers=workers)
    cov_d = _covariances_from_pool(dense, dense, dist_d, idx_d, radius, min_neighbors)
    vals_d, vecs_d = eigh3_batch(cov_d)
    dense_normals = vecs_d[:, :, 0]
    dense_cloud = orient_normals(PointCloud(dense, dense_normals), k=orient_k)
    oriented = np.asarray(dense_cloud.normals)

    same = queries.shape == dense.shape and np.array_equal(queries, dense)
    if same:
        return TargetFeatures(oriented.copy(), _variations_batch(vals_d))

    dist_q, idx_q = tree.query(queries, k=pool, workers=workers)
    cov_q = _covariances_from_pool(queries, dense, dist_q, idx_q, radius, min_neighbors)
    vals_q, vecs_q = eigh3_batch(cov_q)
    normals_q = vecs_q[:, :, 0]
    _, nearest = tree.query(queries, k=1)
    agree = np.einsum("ij,ij->i", normals_q, oriented[nearest])
    normals_q[agree < 0] = -normals_q[agree < 0]
    return TargetFeatures(normals_q, _variations_batch(vals_q))
