"""Binary checkpoint files.

Layout (little-endian throughout):
  magic "MF3DCKPT" | version u32 | meta_len u32 | meta JSON (config snapshot,
  epoch counter, global step, RNG state, optimizer step count) | blobarena:
  count u32, then per blob a length-prefixed name, a dtype tag (0 = f32,
  1 = f64), a dim-count-prefixed shape, and the raw array bytes.

Training checkpoints store f32 blobs; 64-bit verification runs store f64 so
a resumed run reproduces the interrupted one bit-for-bit.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"MF3DCKPT"
VERSION = 1
_DTYPE_TAGS = {0: "<f4", 1: "<f8"}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    global_step: int
    rng_state: tuple
    opt_step_count: int
    blobs: dict[str, np.ndarray]


def save_checkpoint(path, config: dict, blobs: dict[str, np.ndarray],
                    rng_state, epoch: int, global_step: int,
                    opt_step_count: int) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    meta = {
        "config": config,
        "epoch": epoch,
        "global_step": global_step,
        "rng_state": [int(w) for w in rng_state],
        "opt_step_count": opt_step_count,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION),
              struct.pack("<I", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_FOR:
            raise TypeError(f"blob {name!r} has unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", _TAG_FOR[arr.dtype]))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype(_DTYPE_TAGS[_TAG_FOR[arr.dtype]]).tobytes())
    payload = b"".join(chunks)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    blobs: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        tag = r.u8()
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        dtype = np.dtype(_DTYPE_TAGS[tag])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype)
        blobs[name] = data.reshape(shape).copy()
    if r.off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(
        config=meta["config"],
        epoch=int(meta["epoch"]),
        global_step=int(meta["global_step"]),
        rng_state=tuple(meta["rng_state"]),
        opt_step_count=int(meta["opt_step_count"]),
        blobs=blobs,
    )
