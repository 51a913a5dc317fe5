"""Pretraining: the two-term loss, augmentation, and the optimization loop.

The loss is the mean squared normal error plus the mean absolute variation
error over the query points. Augmentation transports targets analytically:
rotations carry normals along, uniform scaling and translation leave both
targets untouched.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .cloud_io import PointCloud, TargetCache
from .decoder import DecoderConfig, Prediction, select_queries
from .encoder import EncoderConfig
from .masking import build_patches, select_mask
from .model import MaskedFeatureModel
from .optim import AdamW, cosine_schedule
from .rng import Rng
from .tensor import Tensor, backward


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the last good state was saved."""


@dataclass
class LossWeights:
    normal: float = 1.0
    variation: float = 1.0

    def validate(self):
        if self.normal < 0 or self.variation < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class AugmentFlags:
    rotation: bool = True
    scaling: bool = True
    translation: bool = False
    rotation_mode: str = "z"  # "z" (gravity axis) or "so3"

    def validate(self):
        if self.rotation_mode not in ("z", "so3"):
            raise ValueError("rotation_mode must be 'z' or 'so3'")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-4
    weight_decay: float = 1e-4
    mask_ratio: float = 0.6
    num_points: int = 2048
    num_patches: int = 128
    patch_size: int = 32
    warmup_epochs: int = 10
    seed: int = 0
    dtype: str = "float32"
    max_steps: int | None = None
    lambda_normal: float = 1.0
    lambda_variation: float = 1.0
    augment: AugmentFlags = field(default_factory=AugmentFlags)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_encoder <= 0 or self.lr_decoder <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.num_patches < 2:
            raise ValueError("need num_patches >= 2 so at least one patch stays unmasked")
        if self.patch_size < 1 or self.patch_size > self.num_points:
            raise ValueError("patch_size must lie in [1, num_points]")
        if self.num_patches > self.num_points:
            raise ValueError("num_patches cannot exceed num_points")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")
        LossWeights(self.lambda_normal, self.lambda_variation).validate()
        self.augment.validate()

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def loss(pred: Prediction, target_normals: np.ndarray, target_variations: np.ndarray,
         weights: LossWeights = LossWeights()) -> tuple[Tensor, float, float]:
    """Mean ||n - n_hat||^2 plus mean |v - v_hat| over the query set."""
    dtype = pred.normals_hat.dtype
    tn = Tensor(np.asarray(target_normals).astype(dtype))
    tv = Tensor(np.asarray(target_variations).reshape(-1, 1).astype(dtype))
    diff = T.sub(pred.normals_hat, tn)
    l_n = T.mean(T.sum_(T.mul(diff, diff), axis=1))
    l_v = T.mean(T.abs_(T.sub(pred.variations_hat, tv)))
    total = T.add(T.mul(l_n, weights.normal), T.mul(l_v, weights.variation))
    return total, float(l_n.data), float(l_v.data)


def _rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rotation_so3(rng: Rng) -> np.ndarray:
    q = rng.normals(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def augment(cloud: PointCloud, flags: AugmentFlags, seed: int) -> PointCloud:
    """Rotation / uniform scaling / translation, in that draw order.

    Normals rotate with the points; surface variation is invariant under all
    three transforms, so the variation array passes through untouched.
    """
    flags.validate()
    rng = Rng(seed)
    pts = np.asarray(cloud.points, dtype=np.float64).copy()
    normals = None if cloud.normals is None else np.asarray(cloud.normals, np.float64).copy()
    if flags.rotation:
        if flags.rotation_mode == "z":
            rot = _rotation_z(rng.uniform(0.0, 2.0 * math.pi))
        else:
            rot = _rotation_so3(rng)
        pts = pts @ rot.T
        if normals is not None:
            normals = normals @ rot.T
    if flags.scaling:
        pts *= rng.uniform(0.8, 1.25)  # one factor for all three axes
    if flags.translation:
        pts += np.array([rng.uniform(-0.1, 0.1) for _ in range(3)])
    return PointCloud(pts, normals, cloud.variations)


@dataclass
class TrainResult:
    model: MaskedFeatureModel
    optimizer: AdamW
    history: list[dict]
    last_checkpoint: str | None


def _optimizer_blobs(opt: AdamW) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.m:
        out[f"adamw.m.{name}"] = opt.m[name]
        out[f"adamw.v.{name}"] = opt.v[name]
    return out


def _snapshot(train_cfg: TrainConfig, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig) -> dict:
    from dataclasses import asdict
    return {"train": asdict(train_cfg), "encoder": asdict(enc_cfg), "decoder": asdict(dec_cfg)}


def build_model(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int,
                dtype) -> MaskedFeatureModel:
    return MaskedFeatureModel(enc_cfg, dec_cfg, Rng(seed), dtype)


def model_from_checkpoint(ck: Checkpoint) -> tuple[MaskedFeatureModel, TrainConfig,
                                                   EncoderConfig, DecoderConfig]:
    train_cfg = TrainConfig(**{**ck.config["train"],
                               "augment": AugmentFlags(**ck.config["train"]["augment"])})
    enc_cfg = EncoderConfig(**ck.config["encoder"])
    dec_cfg = DecoderConfig(**ck.config["decoder"])
    model = build_model(enc_cfg, dec_cfg, train_cfg.seed, train_cfg.np_dtype)
    load_model_params(model, ck.blobs)
    return model, train_cfg, enc_cfg, dec_cfg


def load_model_params(model: MaskedFeatureModel, blobs: dict[str, np.ndarray]) -> None:
    params = model.params()
    for name, p in params.items():
        if name not in blobs:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        arr = blobs[name]
        if arr.shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype)


def pretrain(caches: list[TargetCache], train_cfg: TrainConfig,
             enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
             out_dir: str | None = None, resume: str | None = None,
             log_stream=None) -> TrainResult:
    """Run the masked-feature pretext task over precomputed target caches.

    Writes one checkpoint per epoch (plus last.mf3dckpt) and one JSON record
    per step; aborts with the last good state saved if the loss diverges.
    """
    if not caches:
        raise ValueError("need at least one target cache")
    train_cfg.validate()
    enc_cfg.validate()
    dec_cfg.validate()
    weights = LossWeights(train_cfg.lambda_normal, train_cfg.lambda_variation)
    dtype = train_cfg.np_dtype
    snapshot = _snapshot(train_cfg, enc_cfg, dec_cfg)

    rng = Rng(train_cfg.seed)
    model = MaskedFeatureModel(enc_cfg, dec_cfg, rng, dtype)
    opt = AdamW(model.params(), {"encoder.": train_cfg.lr_encoder,
                                 "decoder.": train_cfg.lr_decoder},
                weight_decay=train_cfg.weight_decay)

    start_epoch = 0
    global_step = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ck.config != snapshot:
            raise ValueError("resume checkpoint was written with a different configuration")
        load_model_params(model, ck.blobs)
        opt.load_state({
            "step_count": ck.opt_step_count,
            "m": {k: ck.blobs[f"adamw.m.{k}"] for k in opt.m},
            "v": {k: ck.blobs[f"adamw.v.{k}"] for k in opt.v},
        })
        rng.set_state(ck.rng_state)
        start_epoch = ck.epoch
        global_step = ck.global_step

    steps_per_epoch = math.ceil(len(caches) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    warmup_steps = train_cfg.warmup_epochs * steps_per_epoch

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    log_fh = None
    if out_dir is not None and log_stream is None:
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a", encoding="utf-8")
        log_stream = log_fh

    def emit(record: dict):
        history.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record) + "\n")
            log_stream.flush()

    def write_ckpt(name: str, epoch: int) -> str:
        blobs = {k: p.data for k, p in model.params().items()}
        blobs.update(_optimizer_blobs(opt))
        path = os.path.join(out_dir, name)
        save_checkpoint(path, snapshot, blobs, rng.get_state(), epoch,
                        global_step, opt.step_count)
        return path

    history: list[dict] = []
    last_ckpt = None
    steps_this_run = 0
    stop = False
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            order = rng.permutation(len(caches))
            epoch_losses, epoch_ln, epoch_lv = [], [], []
            for b0 in range(0, len(order), train_cfg.batch_size):
                batch = order[b0:b0 + train_cfg.batch_size]
                lr_scale = cosine_schedule(global_step, total_steps, warmup_steps, 1.0)
                parts, lns, lvs = [], [], []
                for ci in batch:
                    cache = caches[int(ci)]
                    n_take = min(train_cfg.num_points, len(cache))
                    idx = rng.sample(len(cache), n_take)
                    cloud = PointCloud(
                        cache.dense_points[idx].astype(np.float64),
                        cache.normals[idx].astype(np.float64),
                        cache.variations[idx].astype(np.float64))
                    cloud = augment(cloud, train_cfg.augment, seed=rng.next_u64())
                    patches = build_patches(cloud.points, train_cfg.num_patches,
                                            train_cfg.patch_size, seed=rng.next_u64())
                    split = select_mask(patches, train_cfg.mask_ratio,
                                        seed=rng.next_u64(), cloud_size=len(cloud))
                    queries = select_queries(split.masked_points, dec_cfg.query_ratio,
                                             seed=rng.next_u64())
                    pred, _ = model.forward(cloud.points, patches, split, queries)
                    l, ln, lv = loss(pred, cloud.normals[queries],
                                     cloud.variations[queries], weights)
                    parts.append(T.reshape(l, (1,)))
                    lns.append(ln)
                    lvs.append(lv)
                total = T.mean(T.concat(parts)) if len(parts) > 1 else T.reshape(parts[0], ())
                value = float(total.data)
                if not np.isfinite(value):
                    if out_dir is not None:
                        last_ckpt = write_ckpt("abort.mf3dckpt", epoch)
                    raise TrainingDiverged(
                        f"non-finite loss at step {global_step + 1}; last good state saved")
                backward(total)
                opt.step(lr_scale)
                opt.zero_grad()
                global_step += 1
                steps_this_run += 1
                epoch_losses.append(value)
                epoch_ln.append(float(np.mean(lns)))
                epoch_lv.append(float(np.mean(lvs)))
                emit({"epoch": epoch + 1, "step": global_step, "loss": value,
                      "loss_n": epoch_ln[-1], "loss_v": epoch_lv[-1],
                      "lr": train_cfg.lr_encoder * lr_scale})
                if train_cfg.max_steps is not None and steps_this_run >= train_cfg.max_steps:
                    stop = True
                    break
            emit({"epoch": epoch + 1, "step": global_step,
                  "loss": float(np.mean(epoch_losses)),
                  "loss_n": float(np.mean(epoch_ln)),
                  "loss_v": float(np.mean(epoch_lv)),
                  "lr": train_cfg.lr_encoder * lr_scale, "scope": "epoch"})
            if out_dir is not None:
                write_ckpt(f"epoch_{epoch + 1:04d}.mf3dckpt", epoch + 1)
                last_ckpt = write_ckpt("last.mf3dckpt", epoch + 1)
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, opt, history, last_ckpt)
