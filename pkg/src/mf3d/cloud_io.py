"""Point cloud and mesh file handling.

Supported formats: ASCII XYZ in, ASCII OFF / OBJ (v and f records) in,
ASCII PLY out, and a little-endian binary cache ("MF3D") that stores a
dense point set together with its precomputed per-point target features.
Parsers reject malformed input instead of truncating it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

CACHE_MAGIC = b"MF3D"
CACHE_VERSION = 1


class ParseError(ValueError):
    """Malformed or unsupported geometry file."""


class CacheError(ValueError):
    """Malformed feature-cache file."""


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    variations: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("non-finite coordinates")
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals)
            if self.normals.shape != (n, 3):
                raise ValueError("normals length mismatch")
            norms = np.linalg.norm(self.normals.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise ValueError("normals must be unit length within 1e-4")
        if self.variations is not None:
            self.variations = np.asarray(self.variations)
            if self.variations.shape != (n,):
                raise ValueError("variations length mismatch")
            if self.variations.min() < 0 or self.variations.max() > 1.0 / 3.0 + 1e-6:
                raise ValueError("variations must lie in [0, 1/3]")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (n, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (m, 3)")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ParseError("face index out of range")

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class TargetCache:
    """Dense sampled cloud plus its target features, as persisted on disk."""

    dense_points: np.ndarray
    normals: np.ndarray
    variations: np.ndarray
    neighbor_radius: float

    def __post_init__(self):
        self.dense_points = np.ascontiguousarray(self.dense_points, dtype=np.float32)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float32)
        self.variations = np.ascontiguousarray(self.variations, dtype=np.float32)
        n = len(self.dense_points)
        if self.normals.shape != (n, 3) or self.variations.shape != (n,):
            raise ValueError("cache field lengths disagree")
        if not self.neighbor_radius > 0:
            raise ValueError("neighbor_radius must be positive")

    def __len__(self) -> int:
        return len(self.dense_points)


def parse_xyz(path) -> PointCloud:
    """Read an ASCII XYZ file: one point per nonempty line, extra columns ignored."""
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 3:
                raise ParseError(f"{path}:{lineno}: expected >= 3 fields, got {len(fields)}")
            try:
                points.append([float(fields[0]), float(fields[1]), float(fields[2])])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from exc
    if not points:
        raise ParseError(f"{path}: no points")
    return PointCloud(np.asarray(points, dtype=np.float64))


def _fan_triangulate(indices: list[int]) -> list[tuple[int, int, int]]:
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def _parse_off(lines, path) -> TriangleMesh:
    header = lines[0][1].split()
    rest = list(lines[1:])
    if header[0] != "OFF":
        raise ParseError(f"{path}: not an OFF file")
    counts = header[1:]  # tolerate counts on the OFF line itself
    if not counts:
        if not rest:
            raise ParseError(f"{path}: missing OFF counts")
        counts = rest.pop(0)[1].split()
    if len(counts) < 2:
        raise ParseError(f"{path}: bad OFF counts")
    try:
        n_vert, n_face = int(counts[0]), int(counts[1])
    except ValueError as exc:
        raise ParseError(f"{path}: bad OFF counts") from exc
    if len(rest) < n_vert + n_face:
        raise ParseError(f"{path}: truncated OFF body")
    vertices = []
    for lineno, line in rest[:n_vert]:
        fields = line.split()
        if len(fields) < 3:
            raise ParseError(f"{path}:{lineno}: bad vertex line")
        try:
            vertices.append([float(f) for f in fields[:3]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric vertex") from exc
    faces = []
    for lineno, line in rest[n_vert:n_vert + n_face]:
        fields = line.split()
        try:
            k = int(fields[0])
            idx = [int(f) for f in fields[1:1 + k]]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}:{lineno}: bad face line") from exc
        if len(idx) != k or k < 3:
            raise ParseError(f"{path}:{lineno}: face needs >= 3 indices")
        faces.extend(_fan_triangulate(idx))
    return TriangleMesh(np.asarray(vertices), np.asarray(faces).reshape(-1, 3))


# OBJ records that carry no geometry we need and are safe to skip.
_OBJ_IGNORED = {"vn", "vt", "s", "o", "g", "mtllib", "usemtl"}


def _parse_obj(lines, path) -> TriangleMesh:
    vertices = []
    faces = []
    for lineno, line in lines:
        fields = line.split()
        tag = fields[0]
        if tag == "v":
            if len(fields) < 4:
                raise ParseError(f"{path}:{lineno}: bad vertex line")
            try:
                vertices.append([float(f) for f in fields[1:4]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric vertex") from exc
        elif tag == "f":
            idx = []
            for ref in fields[1:]:
                head = ref.split("/")[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad face reference {ref!r}") from exc
                if i <= 0:
                    raise ParseError(f"{path}:{lineno}: only positive 1-based indices supported")
                idx.append(i - 1)
            if len(idx) < 3:
                raise ParseError(f"{path}:{lineno}: face needs >= 3 vertices")
            faces.extend(_fan_triangulate(idx))
        elif tag in _OBJ_IGNORED:
            continue
        else:
            raise ParseError(f"{path}:{lineno}: unsupported OBJ element {tag!r}")
    if not vertices or not faces:
        raise ParseError(f"{path}: no triangles")
    return TriangleMesh(np.asarray(vertices), np.asarray(faces).reshape(-1, 3))


def parse_mesh(path) -> TriangleMesh:
    """Read an ASCII OFF or OBJ mesh; polygons are fan-triangulated."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [
            (lineno, line)
            for lineno, line in enumerate(fh, start=1)
            if line.strip() and not line.lstrip().startswith("#")
        ]
    if not lines:
        raise ParseError(f"{path}: empty file")
    if lines[0][1].lstrip().startswith("OFF"):
        return _parse_off(lines, path)
    return _parse_obj(lines, path)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Draw n area-uniform surface samples (barycentric-uniform per triangle)."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = Rng(seed)
    cum = np.cumsum(areas)
    picks = rng.randoms(n) * total
    tri = np.searchsorted(cum, picks, side="right")
    tri = np.minimum(tri, len(areas) - 1)
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    u = rng.randoms(n)
    v = rng.randoms(n)
    flip = u + v > 1.0  # reflect into the lower triangle: uniform barycentric
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(pts)


def write_cache(cache: TargetCache, path) -> None:
    n = len(cache)
    payload = [
        CACHE_MAGIC,
        struct.pack("<I", CACHE_VERSION),
        struct.pack("<I", n),
        struct.pack("<f", cache.neighbor_radius),
        cache.dense_points.astype("<f4").tobytes(),
        cache.normals.astype("<f4").tobytes(),
        cache.variations.astype("<f4").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(payload))


def read_cache(path) -> TargetCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CacheError(f"{path}: truncated header")
    if blob[:4] != CACHE_MAGIC:
        raise CacheError(f"{path}: bad magic {blob[:4]!r}")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported version {version}")
    (radius,) = struct.unpack_from("<f", blob, 12)
    need = 16 + 4 * (3 * n + 3 * n + n)
    if len(blob) != need:
        raise CacheError(f"{path}: expected {need} bytes, found {len(blob)}")
    off = 16
    points = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    off += 12 * n
    normals = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    off += 12 * n
    variations = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
    return TargetCache(points.copy(), normals.copy(), variations.copy(), float(radius))


def _clamp8(x: float) -> int:
    return min(255, max(0, int(x)))


def write_colored_ply(cloud: PointCloud, mode: str, path) -> None:
    """Write an ASCII PLY with per-vertex RGB encoding one target feature.

    normal mode maps each component via (n + 1) / 2 onto [0, 255];
    variation mode maps [0, 1/3] linearly from white to red.
    """
    if mode == "normal":
        if cloud.normals is None:
            raise ValueError("cloud has no normals")
        colors = [(
            _clamp8((n[0] + 1.0) / 2.0 * 255),
            _clamp8((n[1] + 1.0) / 2.0 * 255),
            _clamp8((n[2] + 1.0) / 2.0 * 255),
        ) for n in np.asarray(cloud.normals, dtype=np.float64)]
    elif mode == "variation":
        if cloud.variations is None:
            raise ValueError("cloud has no variations")
        t = np.clip(np.asarray(cloud.variations, dtype=np.float64) * 3.0, 0.0, 1.0)
        colors = [(255, _clamp8((1.0 - ti) * 255), _clamp8((1.0 - ti) * 255)) for ti in t]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, (r, g, b) in zip(np.asarray(cloud.points, dtype=np.float64), colors):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {r} {g} {b}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
