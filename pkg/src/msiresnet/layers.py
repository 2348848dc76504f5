"""Differentiable layers with whole-layer forward and backward rules.

Every layer implements ``forward(x, ctx) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)``. ``cache`` holds whatever the
backward rule needs (inputs, dropout masks, batch statistics), so backward
is always consistent with the exact forward realization. ``grads`` maps the
layer's local parameter names to gradient arrays shaped like the
parameters. Container layers prefix their children's names with
``"<child>."``.

The module-level functions (``conv2d_forward``, ``maxpool2d`` ...) are the
stateless forward kernels the layers are built from.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, InvalidSpecError, ShapeError
from .tensor import DTYPE, InitSpec, channel_moments, create, matmul


@dataclass
class ForwardContext:
    """Per-pass settings shared by every layer of one forward pass."""

    train: bool = False
    rng: np.random.Generator | None = None


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidSpecError(f"channel counts must be >= 1: {self}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise InvalidSpecError(f"bad kernel/stride/padding: {self}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def output_hw(self, h, w):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeError(f"input {h}x{w} (padding {ph},{pw}) smaller than kernel {kh}x{kw}")
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _check_conv_input(x, spec):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {x.shape[1]}")
    return spec.output_hw(x.shape[2], x.shape[3])


def _im2col(x, spec):
    """Unfold ``x`` into a ``[N*Ho*Wo, C*kh*kw]`` patch matrix."""
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols


def _col2im(dcols, x_shape, spec, ho, wo):
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    n, c, h, w = x_shape
    dcols = dcols.reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, ph:ph + h, pw:pw + w]


def conv2d_forward(x, spec, weight, bias=None):
    """Cross-correlation of ``x`` with ``weight`` via im2col and one matmul."""
    ho, wo = _check_conv_input(x, spec)
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv weight shape {weight.shape} != {spec.weight_shape}")
    n = x.shape[0]
    cols = _im2col(x, spec)
    out = matmul(cols, weight.reshape(spec.out_channels, -1).T)
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, spec.out_channels).transpose(0, 3, 1, 2))


def conv2d_naive(x, spec, weight, bias=None):
    """Direct nested-loop cross-correlation. Test oracle only."""
    ho, wo = _check_conv_input(x, spec)
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    n, c, h, w = x.shape
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=np.result_type(x, weight))
    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * sh + di - ph
                                s = j * sw + dj - pw
                                if 0 <= r < h and 0 <= s < w:
                                    acc += x[b, ci, r, s] * weight[o, ci, di, dj]
                    out[b, o, i, j] = acc
    return out


def maxpool2d(x, return_indices=False):
    """2x2 max pooling with stride 2.

    Odd trailing rows/columns are dropped. With ``return_indices`` the
    within-window argmax (0..3, row-major, first occurrence on ties) is
    returned as well.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"2x2 pooling window larger than input {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return (out, idx) if return_indices else out


def batchnorm2d(x, gamma, beta, running_mean, running_var, train, eps=1e-5, momentum=0.1):
    """Batch normalization over NCHW input.

    In train mode the batch statistics normalize ``x`` and the running
    buffers are updated in place. Returns ``(y, xhat, inv_std)``.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d expects {gamma.shape[0]} channels, got input {x.shape}")
    if train:
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise DegenerateBatchError(f"train-mode batchnorm needs N*H*W >= 2, got {n * h * w}")
        mean, var = channel_moments(x)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, inv_std


def adaptive_avgpool2d(x):
    """Global average pool to a 1x1 spatial map."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avgpool2d expects NCHW input, got shape {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def linear(x, weight, bias=None):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects [N, {weight.shape[1]}] input, got {x.shape}")
    y = matmul(x, weight.T)
    if bias is not None:
        y = y + bias
    return y


def dropout(x, p, train, rng):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise InvalidSpecError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def sigmoid(x):
    """Logistic function, kept strictly inside (0, 1) even where it saturates."""
    # exp of a non-positive argument never overflows
    z = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    info = np.finfo(y.dtype)
    return np.clip(y, info.smallest_subnormal, 1.0 - info.epsneg)


def relu(x):
    return np.maximum(x, 0.0)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise InvalidSpecError(f"unknown activation {kind!r}")


class Layer:
    """Base class. Subclasses fill ``params`` and ``buffers`` with arrays."""

    kind = "layer"

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def children(self):
        return []

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        out = {prefix + k: v for k, v in self.params.items()}
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        out = {prefix + k: v for k, v in self.buffers.items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        for _, child in self.children():
            child.astype(dtype)
        return self

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, spec, rng=None, dtype=DTYPE):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        self.params["weight"] = create(spec.weight_shape, InitSpec.kaiming_normal(fan_in), dtype, rng)
        if spec.bias:
            self.params["bias"] = create((spec.out_channels,), dtype=dtype)

    def forward(self, x, ctx):
        y = conv2d_forward(x, self.spec, self.params["weight"], self.params.get("bias"))
        return y, x

    def backward(self, dy, x):
        spec = self.spec
        n, o, ho, wo = dy.shape
        cols = _im2col(x, spec)
        dy2 = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        w2 = self.params["weight"].reshape(o, -1)
        grads = {"weight": matmul(dy2.T, cols).reshape(spec.weight_shape)}
        if spec.bias:
            grads["bias"] = dy2.sum(axis=0)
        dx = _col2im(matmul(dy2, w2), x.shape, spec, ho, wo)
        return dx, grads

    def __repr__(self):
        s = self.spec
        return f"Conv2d({s.in_channels}, {s.out_channels}, k={s.kernel}, s={s.stride}, p={s.padding})"


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=DTYPE):
        super().__init__()
        if not 0.0 < momentum <= 1.0:
            raise InvalidSpecError(f"momentum must be in (0, 1], got {momentum}")
        if eps <= 0:
            raise InvalidSpecError(f"eps must be positive, got {eps}")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, ctx):
        y, xhat, inv_std = batchnorm2d(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            ctx.train, self.eps, self.momentum,
        )
        return y, (xhat, inv_std, ctx.train)

    def backward(self, dy, cache):
        xhat, inv_std, train = cache
        axes = (0, 2, 3)
        gamma = self.params["gamma"]
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = dy * gamma[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not train:
            return dxhat * scale, grads
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dx = scale / m * (
            m * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
        return dx, grads

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class MaxPool2d(Layer):
    kind = "maxpool"

    def forward(self, x, ctx):
        y, idx = maxpool2d(x, return_indices=True)
        return y, (x.shape, idx)

    def backward(self, dy, cache):
        shape, idx = cache
        n, c, h, w = shape
        ho, wo = dy.shape[2], dy.shape[3]
        win = np.zeros((n, c, ho, wo, 4), dtype=dy.dtype)
        np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, :, :2 * ho, :2 * wo] = (
            win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        )
        return dx, {}


class AdaptiveAvgPool2d(Layer):
    kind = "avgpool"

    def forward(self, x, ctx):
        return adaptive_avgpool2d(x), x.shape

    def backward(self, dy, shape):
        h, w = shape[2], shape[3]
        return np.broadcast_to(dy / (h * w), shape).copy(), {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=DTYPE):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise InvalidSpecError(f"linear sizes must be >= 1, got {in_features}->{out_features}")
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = create((out_features, in_features), InitSpec.kaiming_normal(in_features), dtype, rng)
        if bias:
            self.params["bias"] = create((out_features,), dtype=dtype)

    def forward(self, x, ctx):
        return linear(x, self.params["weight"], self.params.get("bias")), x

    def backward(self, dy, x):
        grads = {"weight": matmul(dy.T, x)}
        if "bias" in self.params:
            grads["bias"] = dy.sum(axis=0)
        return matmul(dy, self.params["weight"]), grads

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise InvalidSpecError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, ctx):
        if ctx.train and self.p > 0 and ctx.rng is None:
            raise InvalidSpecError("train-mode dropout needs a random generator in the forward context")
        return dropout(x, self.p, ctx.train, ctx.rng)

    def backward(self, dy, mask):
        return (dy if mask is None else dy * mask), {}

    def __repr__(self):
        return f"Dropout({self.p})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return relu(x), x > 0

    def backward(self, dy, positive):
        return dy * positive, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, ctx):
        y = sigmoid(x)
        return y, y

    def backward(self, dy, y):
        return dy * y * (1.0 - y), {}


class Sequential(Layer):
    """Ordered composition of named layers."""

    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise InvalidSpecError(f"duplicate layer names in {names}")

    def children(self):
        return self.layers

    def forward(self, x, ctx):
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x, ctx)
            caches.append(cache)
        return x, caches

    def backward(self, dy, caches):
        grads = {}
        for (name, layer), cache in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(dy, cache)
            grads.update({f"{name}.{k}": v for k, v in g.items()})
        return dy, grads

    def __repr__(self):
        inner = ", ".join(f"{n}={l!r}" for n, l in self.layers)
        return f"Sequential({inner})"


class ResidualBlock(Layer):
    """``relu(branch(x) + shortcut(x))``; identity shortcut when ``shortcut`` is None."""

    kind = "residual"

    def __init__(self, branch, shortcut=None):
        super().__init__()
        self.branch = branch
        self.shortcut = shortcut

    def children(self):
        kids = [("branch", self.branch)]
        if self.shortcut is not None:
            kids.append(("shortcut", self.shortcut))
        return kids

    def forward(self, x, ctx):
        b, bcache = self.branch.forward(x, ctx)
        if self.shortcut is None:
            s, scache = x, None
        else:
            s, scache = self.shortcut.forward(x, ctx)
        if b.shape != s.shape:
            raise ShapeError(f"residual branch {b.shape} and shortcut {s.shape} differ")
        z = b + s
        return relu(z), (bcache, scache, z > 0)

    def backward(self, dy, cache):
        bcache, scache, positive = cache
        dz = dy * positive
        dx, grads = self.branch.backward(dz, bcache)
        grads = {f"branch.{k}": v for k, v in grads.items()}
        if self.shortcut is None:
            dx = dx + dz
        else:
            ds, sg = self.shortcut.backward(dz, scache)
            dx = dx + ds
            grads.update({f"shortcut.{k}": v for k, v in sg.items()})
        return dx, grads

    def __repr__(self):
        return f"ResidualBlock(branch={self.branch!r}, shortcut={self.shortcut!r})"
