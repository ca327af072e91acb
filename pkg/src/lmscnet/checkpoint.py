"""Binary checkpoints.

Layout (all integers little-endian)::

    b"LMSC" | u32 version | u32 len | config JSON
    u32 n_params
    n_params x ( u32 name_len | name | u32 ndim | ndim x u32 dims | float64 data )
    u8 has_adam
    [ u64 step | f64 beta1 | f64 beta2 | f64 eps | n_params x (float64 m | float64 v) ]
"""
from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError
from .model import LMSCNet, ModelConfig
from .optim import AdamState
from .tensor import Tensor, get_default_dtype

MAGIC = b"LMSC"
VERSION = 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def checkpoint_save(model: LMSCNet, stream: BinaryIO, adam: AdamState | None = None) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(MAGIC + _u32(VERSION) + _u32(len(cfg)) + cfg)
    params = list(model.params.items())
    buf.write(_u32(len(params)))
    for name, t in params:
        raw = name.encode()
        buf.write(_u32(len(raw)) + raw + _u32(t.ndim))
        buf.write(b"".join(_u32(d) for d in t.shape))
        buf.write(t.data.astype("<f8").tobytes())
    if adam is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + struct.pack("<Qddd", adam.step, adam.beta1, adam.beta2, adam.eps))
        for m, v in zip(adam.m, adam.v):
            buf.write(m.astype("<f8").tobytes() + v.astype("<f8").tobytes())
    stream.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_load(stream: BinaryIO, dtype=None) -> tuple[LMSCNet, AdamState | None]:
    """Rebuild a model (and optimizer state, if stored). Nothing is returned on error."""
    r = _Reader(stream.read())
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt config block: {exc}") from exc
    dtype = dtype or get_default_dtype()
    params: dict[str, Tensor] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        params[name] = Tensor(r.f64(shape), requires_grad=True, dtype=dtype)
    adam = None
    flag = r.take(1)
    if flag == b"\x01":
        step, b1, b2, eps = struct.unpack("<Qddd", r.take(32))
        ms, vs = [], []
        for t in params.values():
            ms.append(r.f64(t.shape))
            vs.append(r.f64(t.shape))
        adam = AdamState(m=ms, v=vs, step=step, beta1=b1, beta2=b2, eps=eps)
    elif flag != b"\x00":
        raise FormatError("corrupt optimizer flag")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after checkpoint")
    try:
        model = LMSCNet(config, params)
    except Exception as exc:
        raise FormatError(f"checkpoint parameters do not match its config: {exc}") from exc
    return model, adam


def save_file(path, model: LMSCNet, adam: AdamState | None = None) -> None:
    with open(path, "wb") as f:
        checkpoint_save(model, f, adam)


def load_file(path, dtype=None) -> tuple[LMSCNet, AdamState | None]:
    with open(path, "rb") as f:
        return checkpoint_load(f, dtype)
