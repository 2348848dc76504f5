"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"NNCK"                       magic
    u16                           format version
    u32 + bytes                   descriptor text (UTF-8 key=value lines)
    u32                           tensor count
    per tensor:
        u16 + bytes               name
        u8                        dtype code (1 = float64, 2 = float32)
        u8                        rank
        u64 * rank                dims
        raw little-endian data

The descriptor carries the architecture (``arch.*``), the training config
(``train.*``), the Adam step counter and the random-generator algorithm.
Tensors are model parameters (``param.*``), batchnorm buffers
(``buffer.*``) and optimizer moments (``adam.m.*``, ``adam.v.*``).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    CheckpointShapeError,
    InvalidSpecError,
    TruncatedFileError,
    VersionMismatchError,
)
from .tensor import RNG_ALGORITHM
from .training import AdamState, TrainConfig
from .zoo import ArchDescriptor, build

MAGIC = b"NNCK"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
CODE_FOR = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}


@dataclass
class Checkpoint:
    model: object
    state: AdamState
    config: TrainConfig


def _tensors(model, state):
    out = dict(model.state_arrays())
    if state is not None:
        for k in model.named_parameters():
            out[f"adam.m.{k}"] = state.m[k]
            out[f"adam.v.{k}"] = state.v[k]
    return out


def dumps(model, state=None, cfg=None):
    if model.descriptor is None:
        raise CheckpointError("only models built from a descriptor can be checkpointed")
    text = model.descriptor.to_text()
    if cfg is not None:
        text += cfg.to_text()
    text += f"adam.t={state.t if state is not None else 0}\n"
    text += f"adam.present={int(state is not None)}\n"
    text += f"rng={RNG_ALGORITHM}\n"
    desc = text.encode("utf-8")

    tensors = _tensors(model, state)
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(desc)), desc,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        code = CODE_FOR.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()]
    return b"".join(parts)


def save_checkpoint(model, state, cfg, path):
    with open(path, "wb") as fh:
        fh.write(dumps(model, state, cfg))


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf, dtype=None):
    r = _Reader(buf)
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    (n,) = r.unpack("<I", "descriptor length")
    text = bytes(r.take(n, "descriptor")).decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (ln,) = r.unpack("<H", f"name length of tensor {i}")
        name = bytes(r.take(ln, f"name of tensor {i}")).decode("utf-8")
        code, rank = r.unpack("<BB", f"header of {name}")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        dt = DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"data of {name}"), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor")

    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    try:
        desc = ArchDescriptor.from_text(text)
    except InvalidSpecError as e:
        raise CheckpointError(f"bad architecture descriptor: {e}") from e
    cfg = TrainConfig.from_mapping({k[6:]: v for k, v in kv.items() if k.startswith("train.")})

    model = build(desc)
    expected = _tensors(model, AdamState.for_params(model.named_parameters())
                        if kv.get("adam.present") == "1" else None)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"tensor set differs from descriptor: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, arr in expected.items():
        if tensors[k].shape != arr.shape:
            raise CheckpointShapeError(f"tensor {k}: shape {tensors[k].shape}, descriptor needs {arr.shape}")

    stored = next((a.dtype for k, a in tensors.items() if k.startswith("param.")), np.dtype(np.float64))
    target = np.dtype(dtype) if dtype is not None else stored
    model.astype(target)
    for k, arr in model.state_arrays().items():
        arr[...] = tensors[k]
    state = AdamState(t=int(kv.get("adam.t", "0")))
    if kv.get("adam.present") == "1":
        for k in model.named_parameters():
            state.m[k] = tensors[f"adam.m.{k}"].astype(target)
            state.v[k] = tensors[f"adam.v.{k}"].astype(target)
    else:
        state = AdamState.for_params(model.named_parameters())
    model.eval()
    return Checkpoint(model, state, cfg)


def load_checkpoint(path, dtype=None):
    """Read a checkpoint; returns :class:`Checkpoint` with the model in eval mode."""
    with open(path, "rb") as fh:
        return loads(fh.read(), dtype)
