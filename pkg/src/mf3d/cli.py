"""Command-line surface for the pretraining pipeline.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
MF3D_THREADS caps worker threads used for per-file preparation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .cloud_io import (CacheError, ParseError, PointCloud, TargetCache,
                       parse_mesh, parse_xyz, read_cache, sample_surface,
                       write_cache, write_colored_ply)
from .config import ConfigError, load_run_config
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .geometry import compute_targets, normalize_unit_sphere
from .masking import build_patches
from .model import MaskedFeatureModel
from .rng import Rng
from .tensor import Tensor, grad_check, inject_backward_fault, no_grad
from .training import TrainingDiverged, loss, model_from_checkpoint, pretrain
from . import tensor as T


class UsageError(ValueError):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def thread_count() -> int:
    env = os.environ.get("MF3D_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"MF3D_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _prepare_one(path: str, out_dir: str, samples: int, radius: float,
                 seed: int, workers: int) -> str:
    if path.endswith(".xyz"):
        dense = parse_xyz(path).points
    else:
        mesh = parse_mesh(path)
        dense = sample_surface(mesh, samples, seed).points
    dense = normalize_unit_sphere(dense)
    feats = compute_targets(dense, dense, radius=radius, workers=workers)
    cache = TargetCache(dense.astype(np.float32), feats.normals.astype(np.float32),
                        feats.variations.astype(np.float32), radius)
    stem = os.path.splitext(os.path.basename(path))[0]
    out_path = os.path.join(out_dir, stem + ".mf3d")
    write_cache(cache, out_path)
    return out_path


def cmd_prepare(args) -> int:
    if (args.mesh_dir is None) == (args.xyz_dir is None):
        raise UsageError("exactly one of --mesh-dir / --xyz-dir is required")
    src = args.mesh_dir or args.xyz_dir
    exts = (".off", ".obj") if args.mesh_dir else (".xyz",)
    if not os.path.isdir(src):
        raise UsageError(f"{src}: not a directory")
    files = sorted(os.path.join(src, f) for f in os.listdir(src)
                   if f.lower().endswith(exts))
    if not files:
        raise UsageError(f"{src}: no input files with extensions {exts}")
    os.makedirs(args.out, exist_ok=True)
    master = Rng(args.seed)
    seeds = [master.next_u64() for _ in files]
    pool_size = min(thread_count(), len(files))
    inner_workers = 1 if pool_size > 1 else thread_count()
    t0 = time.perf_counter()
    done, failed = 0, 0

    def job(pair):
        path, seed = pair
        return _prepare_one(path, args.out, args.samples, args.radius, seed, inner_workers)

    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        for path, result in zip(files, pool.map(_guarded(job), zip(files, seeds))):
            if isinstance(result, Exception):
                failed += 1
                print(f"error: {path}: {result}", file=sys.stderr)
            else:
                done += 1
    elapsed = time.perf_counter() - t0
    print(f"prepared {done}/{len(files)} caches in {elapsed:.2f}s "
          f"(samples={args.samples}, radius={args.radius})")
    return 1 if done == 0 else 0


def _guarded(fn):
    def wrapper(arg):
        try:
            return fn(arg)
        except Exception as exc:  # collected and reported per file
            return exc
    return wrapper


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    cache_dir = cfg.paths.cache_dir
    if not os.path.isdir(cache_dir):
        raise UsageError(f"{cache_dir}: cache directory not found")
    paths = sorted(os.path.join(cache_dir, f) for f in os.listdir(cache_dir)
                   if f.endswith(".mf3d"))
    if not paths:
        raise UsageError(f"{cache_dir}: no .mf3d caches")
    caches = [read_cache(p) for p in paths]
    result = pretrain(caches, cfg.train, cfg.encoder, cfg.decoder,
                      out_dir=cfg.paths.out_dir, resume=args.resume)
    steps = [r for r in result.history if "scope" not in r]
    if steps:
        print(f"trained {len(steps)} steps; final loss {steps[-1]['loss']:.6f}")
    print(f"checkpoint: {result.last_checkpoint}")
    return 0


_TINY_ENCODER = EncoderConfig(d_model=8, depth=1, heads=2, ffn_mult=2, patch_embed_hidden=8)
_TINY_DECODER = DecoderConfig(blocks=1, d_model=8, heads=2)


def _per_op_checks(rng: Rng) -> list[tuple[str, float]]:
    """Central-difference check for every differentiable op, in float64.

    Every constant is drawn once up front so the checked functions are pure.
    """
    def t(shape):
        return Tensor(rng.normals(shape).astype(np.float64))

    c53, c53b = t((5, 3)), t((5, 3))
    c43 = t((4, 3))
    c453, c453b = t((4, 5, 3)), t((4, 5, 3))
    c3a, c3b = t((3,)), t((3,))
    c254 = t((2, 5, 4))
    cw43 = t((4, 3))
    c23, c63 = t((2, 3)), t((6, 3))
    c62 = t((6, 2))
    c423 = t((4, 2, 3))
    c33 = t((3, 3))
    c4 = t((4,))
    idx = np.array([2, 0, 1])
    cases = [
        ("add", lambda x: T.sum_(T.mul(T.add(x, c53), c53b)), t((5, 3))),
        ("add_broadcast", lambda x: T.sum_(T.mul(T.add(c453, x), c453b)), t((3,))),
        ("sub", lambda x: T.sum_(T.mul(T.sub(x, c53), c53b)), t((5, 3))),
        ("mul", lambda x: T.sum_(T.mul(x, c53)), t((5, 3))),
        ("abs", lambda x: T.sum_(T.abs_(x)), t((5, 3))),
        ("relu", lambda x: T.sum_(T.relu(x)), t((5, 3))),
        ("sigmoid", lambda x: T.sum_(T.mul(T.sigmoid(x), c43)), t((4, 3))),
        ("gelu", lambda x: T.sum_(T.mul(T.gelu(x), c43)), t((4, 3))),
        ("matmul", lambda x: T.sum_(T.matmul(x, cw43)), t((2, 5, 4))),
        ("matmul_lhs", lambda x: T.sum_(T.matmul(c254, x)), t((4, 3))),
        ("softmax", lambda x: T.sum_(T.mul(T.softmax_lastdim(x), c43)), t((4, 3))),
        ("layer_norm", lambda x: T.sum_(T.mul(T.layer_norm(x, c3a, c3b), c43)), t((4, 3))),
        ("max_lastdim", lambda x: T.sum_(T.max_lastdim(x)), t((4, 6))),
        ("concat", lambda x: T.sum_(T.mul(T.concat([x, c23]), c63)), t((4, 3))),
        ("reshape", lambda x: T.sum_(T.mul(T.reshape(x, (6, 2)), c62)), t((3, 4))),
        ("transpose", lambda x: T.sum_(T.mul(T.transpose(x, (1, 0, 2)), c423)), t((2, 4, 3))),
        ("index_select", lambda x: T.sum_(T.mul(T.index_select(x, idx), c33)), t((4, 3))),
        ("mean", lambda x: T.mean(T.mul(x, c53)), t((5, 3))),
        ("sum_axis", lambda x: T.sum_(T.mul(T.sum_(x, axis=1), c4)), t((4, 6))),
    ]
    return [(name, grad_check(fn, x)) for name, fn, x in cases]


def _tiny_pipeline(seed: int):
    """Fixed tiny forward problem for the end-to-end gradient check."""
    from .masking import select_mask
    from .decoder import select_queries

    rng = Rng(seed)
    model = MaskedFeatureModel(_TINY_ENCODER, _TINY_DECODER, rng, np.float64)
    pts = rng.normals((24, 3))
    patches = build_patches(pts, 6, 4, seed=rng.next_u64())
    split = select_mask(patches, 0.5, seed=rng.next_u64(), cloud_size=len(pts))
    queries = select_queries(split.masked_points, 1.0, seed=rng.next_u64())
    tn = rng.normals((len(queries), 3))
    tn /= np.linalg.norm(tn, axis=1, keepdims=True)
    tv = np.abs(rng.normals(len(queries))) * 0.1

    def forward() -> Tensor:
        pred, _ = model.forward(pts, patches, split, queries)
        total, _, _ = loss(pred, tn, tv)
        return total

    return model, forward


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        load_run_config(args.config)  # validated, but the check always runs tiny
    seed = args.seed
    results = []
    with inject_backward_fault("gelu") if args.inject_fault else _nullcontext():
        per_op = _per_op_checks(Rng(seed))
        worst_op, worst_op_err = max(per_op, key=lambda kv: kv[1])

        model, forward = _tiny_pipeline(seed)
        params = model.params()
        total = sum(p.size for p in params.values())
        worst_param, worst_param_err = "", 0.0
        # Two step sizes per parameter, keeping the better estimate: tiny
        # gradients sit on the roundoff floor (~|f|*1e-15/eps) at small eps,
        # while relu/max kink crossings spoil large eps. A genuinely wrong
        # gradient fails at every eps (see the fault-injection control).
        for name, p in params.items():
            err = min(grad_check(lambda _: forward(), p, eps=1e-4),
                      grad_check(lambda _: forward(), p, eps=1e-5))
            if err > worst_param_err:
                worst_param, worst_param_err = name, err
    print(f"per-op suite: {len(per_op)} ops, max rel err {worst_op_err:.3e} "
          f"(worst: {worst_op})")
    print(f"full pipeline: {total} parameters, max rel err {worst_param_err:.3e} "
          f"(worst: {worst_param})")
    ok = worst_op_err < 1e-4 and worst_param_err < args.tolerance
    print("gradcheck PASS" if ok else "gradcheck FAIL")
    return 0 if ok else 1


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _pooled_features(model: MaskedFeatureModel, points: np.ndarray,
                     num_patches: int, patch_size: int, seed: int):
    patches = build_patches(points, min(num_patches, len(points)),
                            min(patch_size, len(points)), seed)
    with no_grad():
        blocks = model.encoder.encode(points, patches,
                                      np.arange(patches.num_patches))
    feats = blocks.features.numpy().astype(np.float64)
    return feats, blocks.centroids, feats.mean(axis=0)


def _load_model(args):
    ck = load_checkpoint(args.ckpt)
    model, train_cfg, enc_cfg, dec_cfg = model_from_checkpoint(ck)
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
        if cfg.encoder.d_model != enc_cfg.d_model:
            raise UsageError(
                f"config d_model {cfg.encoder.d_model} != checkpoint d_model {enc_cfg.d_model}")
    return model, train_cfg


def cmd_features(args) -> int:
    model, train_cfg = _load_model(args)
    cloud = parse_xyz(args.input)
    feats, centroids, pooled = _pooled_features(
        model, cloud.points, train_cfg.num_patches, train_cfg.patch_size, train_cfg.seed)
    doc = {
        "blocks": [{"centroid": centroids[i].tolist(), "feature": feats[i].tolist()}
                   for i in range(len(feats))],
        "pooled": pooled.tolist(),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    print(f"wrote {len(feats)} block features + pooled vector to {args.out}")
    return 0


def _labeled_dir(root: str) -> list[tuple[str, str]]:
    if not os.path.isdir(root):
        raise UsageError(f"{root}: not a directory")
    pairs = []
    for label in sorted(os.listdir(root)):
        sub = os.path.join(root, label)
        if not os.path.isdir(sub):
            continue
        for f in sorted(os.listdir(sub)):
            if f.endswith(".xyz"):
                pairs.append((label, os.path.join(sub, f)))
    if not pairs:
        raise UsageError(f"{root}: expected <label>/<cloud>.xyz layout")
    return pairs


def cmd_probe(args) -> int:
    model, train_cfg = _load_model(args)

    def embed(path_pairs):
        vecs, labels = [], []
        for label, path in path_pairs:
            cloud = parse_xyz(path)
            _, _, pooled = _pooled_features(model, cloud.points, train_cfg.num_patches,
                                            train_cfg.patch_size, train_cfg.seed)
            vecs.append(pooled)
            labels.append(label)
        return np.asarray(vecs), labels

    train_vecs, train_labels = embed(_labeled_dir(args.train_dir))
    test_vecs, test_labels = embed(_labeled_dir(args.test_dir))
    d2 = ((test_vecs[:, None, :] - train_vecs[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    hits = sum(train_labels[j] == want for j, want in zip(nearest, test_labels))
    acc = hits / len(test_labels)
    print(f"probe accuracy: {acc:.4f} ({hits}/{len(test_labels)})")
    return 0


def cmd_visualize(args) -> int:
    cache = read_cache(args.cache)
    cloud = PointCloud(cache.dense_points.astype(np.float64),
                       _renorm(cache.normals), cache.variations.astype(np.float64))
    write_colored_ply(cloud, args.mode, args.out)
    print(f"wrote {args.out}")
    return 0


def _renorm(normals: np.ndarray) -> np.ndarray:
    n = normals.astype(np.float64)
    lengths = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(lengths > 0, lengths, 1.0)


def build_parser() -> _Parser:
    p = _Parser(prog="mf3d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="compute target-feature caches from meshes or clouds")
    sp.add_argument("--mesh-dir")
    sp.add_argument("--xyz-dir")
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=int, default=50000)
    sp.add_argument("--radius", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_prepare)

    sp = sub.add_parser("pretrain", help="run masked-feature pretraining")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resume")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    sp.add_argument("--config")
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("features", help="dump block features for a cloud")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.set_defaults(fn=cmd_features)

    sp = sub.add_parser("probe", help="nearest-neighbor label probe in feature space")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--train-dir", required=True)
    sp.add_argument("--test-dir", required=True)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("visualize", help="write a color-coded PLY from a cache")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--mode", choices=("normal", "variation"), required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_visualize)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, ParseError, CacheError, CheckpointError,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
