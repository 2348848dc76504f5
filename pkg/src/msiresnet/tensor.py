"""Dense NCHW tensors and the primitives the layers are built on.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. The
helpers here add the shape validation the rest of the library relies on.
Float64 is the reference dtype; float32 is accepted as a fast path.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError, ShapeError

DTYPE = np.float64

# Recorded in checkpoints so a run can name the generator that seeded it.
RNG_ALGORITHM = "numpy.PCG64"


def make_rng(seed):
    """Seedable generator used everywhere randomness is needed."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class InitSpec:
    """How to fill a freshly created tensor.

    ``kind`` is one of ``zeros``, ``constant``, ``uniform`` or
    ``kaiming-normal``. Use the classmethod constructors rather than filling
    fields by hand.
    """

    kind: str
    value: float = 0.0
    low: float = 0.0
    high: float = 1.0
    fan_in: int = 1
    seed: int = 0

    @classmethod
    def zeros(cls):
        return cls("zeros")

    @classmethod
    def constant(cls, value):
        return cls("constant", value=float(value))

    @classmethod
    def uniform(cls, low, high, seed=0):
        return cls("uniform", low=float(low), high=float(high), seed=seed)

    @classmethod
    def kaiming_normal(cls, fan_in, seed=0):
        return cls("kaiming-normal", fan_in=int(fan_in), seed=seed)


def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: every dimension must be >= 1")
    return shape


def create(shape, init=None, dtype=DTYPE, rng=None):
    """Allocate a tensor of ``shape`` filled according to ``init``.

    Random kinds draw from ``rng`` when given, otherwise from a generator
    seeded with ``init.seed``; either way equal seeds give identical bits.
    """
    shape = _check_shape(shape)
    init = init or InitSpec.zeros()
    if init.kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if init.kind == "constant":
        return np.full(shape, init.value, dtype=dtype)
    rng = rng if rng is not None else make_rng(init.seed)
    if init.kind == "uniform":
        if not init.high > init.low:
            raise InvalidSpecError(f"uniform bounds must satisfy low < high, got {init.low}, {init.high}")
        return rng.uniform(init.low, init.high, size=shape).astype(dtype, copy=False)
    if init.kind == "kaiming-normal":
        if init.fan_in < 1:
            raise InvalidSpecError(f"fan_in must be >= 1, got {init.fan_in}")
        std = np.sqrt(2.0 / init.fan_in)
        return (rng.standard_normal(size=shape) * std).astype(dtype, copy=False)
    raise InvalidSpecError(f"unknown init kind {init.kind!r}")


def matmul(a, b):
    """Matrix product of a ``[M, K]`` and a ``[K, N]`` tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def reshape(x, shape):
    shape = _check_shape(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return np.ascontiguousarray(x).reshape(shape)


def transpose(x, axes=None):
    """Permute axes (reverse them when ``axes`` is None); result is contiguous."""
    if axes is not None:
        axes = tuple(axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"{axes} is not a permutation of {x.ndim} axes")
    return np.ascontiguousarray(np.transpose(x, axes))


def flat_index(shape, index):
    """Row-major offset of ``index`` inside a tensor of ``shape``."""
    if len(shape) != len(index):
        raise ShapeError(f"index {index} has wrong rank for shape {shape}")
    offset = 0
    for dim, i in zip(shape, index):
        if not 0 <= i < dim:
            raise ShapeError(f"index {index} out of bounds for shape {shape}")
        offset = offset * dim + i
    return offset


def unflatten_index(shape, offset):
    coords = []
    for dim in reversed(shape):
        offset, i = divmod(offset, dim)
        coords.append(i)
    if offset:
        raise ShapeError(f"offset out of bounds for shape {shape}")
    return tuple(reversed(coords))


def channel_moments(x):
    """Per-channel mean and population variance of an NCHW tensor.

    Statistics are taken over the batch and both spatial axes, so the
    divisor is ``N*H*W``.
    """
    if x.ndim != 4:
        raise ShapeError(f"channel_moments expects NCHW input, got shape {x.shape}")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    return mean, var
