"""AdamW with decoupled weight decay, plus the warmup-cosine LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    """Per-group learning rates over named parameters.

    groups maps a name prefix (e.g. "encoder.") to its base learning rate;
    the effective rate is base_lr * lr_scale, so a schedule multiplies all
    groups uniformly.
    """

    def __init__(self, params: dict[str, Tensor], groups: dict[str, float],
                 weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.groups = dict(groups)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}
        for name in self.params:
            self._lr_for(name)  # fail fast on unmatched names

    def _lr_for(self, name: str) -> float:
        for prefix, lr in self.groups.items():
            if name.startswith(prefix):
                return lr
        raise KeyError(f"parameter {name!r} matches no group")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        """One update; parameters with no gradient are still weight-decayed."""
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            lr = self._lr_for(name) * lr_scale
            g = p.grad
            grad = np.zeros_like(self.m[name]) if g is None else g.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data.astype(np.float64)
            new *= 1.0 - lr * self.weight_decay
            new -= lr * update
            p.data = new.astype(p.data.dtype)

    def state(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)


def cosine_schedule(step: int, total: int, warmup: int, base_lr: float,
                    floor_fraction: float = 0.01) -> float:
    """Linear warmup to base_lr, then cosine decay to floor_fraction * base_lr."""
    if not 0 <= step <= total:
        raise ValueError("step must lie in [0, total]")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    span = max(total - warmup, 1)
    t = (step - warmup) / span
    return base_lr * (floor_fraction + (1.0 - floor_fraction) * 0.5 * (1.0 + math.cos(math.pi * t)))
