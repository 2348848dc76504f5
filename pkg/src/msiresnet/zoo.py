"""Architecture descriptors and model builders.

Covers the 41-layer modified ResNet (bottleneck stages of 2/3/5/2 blocks
behind a 3x3 stride-2 stem and a four-layer FC head), the ResNet-18..152
family with a single-logit head, and the three baselines (logistic
regression, a 4-layer MLP and a 5-conv CNN).

A built :class:`Model` is a :class:`~msiresnet.layers.Sequential` whose
top-level layer names match the rows of ``ArchDescriptor.trace()``, so a
forward pass can be checked against the analytically computed shape trace.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import InvalidSpecError, ShapeError
from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    Conv2dSpec,
    Dropout,
    Flatten,
    Linear,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    Sequential,
    Sigmoid,
)
from .tensor import DTYPE, make_rng

ARCHITECTURES = (
    "modified-resnet", "resnet18", "resnet34", "resnet50", "resnet101", "resnet152",
    "logreg", "ffnn4", "cnn5",
)

RESNET_DEPTHS = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    152: ("bottleneck", (3, 8, 36, 3)),
}

MODIFIED_RESNET_BLOCKS = (2, 3, 5, 2)
HEAD_DROPOUT = (0.5, 0.3, 0.2)
FFNN4_WIDTHS = (512, 128, 32)
CNN5_CHANNELS = (16, 32, 64, 128, 256)
CNN5_HIDDEN = 512


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "basic" | "bottleneck"
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1

    @property
    def projection(self):
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass(frozen=True)
class StageSpec:
    kind: str
    blocks: int
    mid_channels: int
    out_channels: int
    stride: int


@dataclass(frozen=True)
class ArchDescriptor:
    """Everything needed to rebuild a model; serializable as key=value text."""

    name: str
    input_hw: int = 224
    width_mult: float = 1.0
    in_channels: int = 3
    # conv stem (resnets): channels, kernel, stride
    stem: tuple = ()
    stages: tuple = ()
    # cnn5 conv plan
    conv_channels: tuple = ()
    # widths of the fully connected layers, output layer last
    fc_widths: tuple = ()
    dropout: tuple = ()

    @property
    def input_shape(self):
        return (self.in_channels, self.input_hw, self.input_hw)

    def blocks(self):
        """Expand ``stages`` into per-block specs, in order."""
        out = []
        ch = self.stem[0] if self.stem else self.in_channels
        for st in self.stages:
            for i in range(st.blocks):
                stride = st.stride if i == 0 else 1
                out.append(BlockSpec(st.kind, ch, st.mid_channels, st.out_channels, stride))
                ch = st.out_channels
        return out

    def trace(self):
        """Expected per-layer output shapes (batch axis omitted)."""
        rows = []
        c, h = self.in_channels, self.input_hw
        if self.stem:
            ch, k, s = self.stem
            h = (h + 2 * (k // 2) - k) // s + 1
            c = ch
            rows.append(("stem", (c, h, h)))
            h //= 2
            rows.append(("maxpool", (c, h, h)))
            for i, st in enumerate(self.stages, 1):
                h = (h - 1) // st.stride + 1
                c = st.out_channels
                rows.append((f"layer{i}", (c, h, h)))
            rows.append(("avgpool", (c, 1, 1)))
            features = c
        elif self.conv_channels:
            for i, ch in enumerate(self.conv_channels, 1):
                h //= 2
                c = ch
                rows.append((f"conv{i}", (c, h, h)))
            features = c * h * h
        else:
            features = c * h * h
        rows.append(("flatten", (features,)))
        for i, w in enumerate(self.fc_widths, 1):
            rows.append((f"fc{i}" if len(self.fc_widths) > 1 else "fc", (w,)))
        return rows

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stages":
                v = ";".join(f"{s.kind}:{s.blocks}:{s.mid_channels}:{s.out_channels}:{s.stride}" for s in v)
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            else:
                v = repr(v) if not isinstance(v, str) else v
            lines.append(f"arch.{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse the ``arch.*`` keys of a key=value block and rebuild via the builder."""
        kv = {}
        for line in text.splitlines():
            if line.startswith("arch.") and "=" in line:
                k, v = line[5:].split("=", 1)
                kv[k] = v
        try:
            desc = describe(
                kv["name"],
                width_mult=float(kv.get("width_mult", "1.0")),
                input_hw=int(kv.get("input_hw", "224")),
                dropout=tuple(float(x) for x in kv["dropout"].split(",")) if kv.get("dropout") else None,
            )
        except KeyError as e:
            raise InvalidSpecError(f"descriptor block is missing key {e}") from None
        if desc.to_text() != "".join(f"arch.{k}={v}\n" for k, v in kv.items()):
            raise InvalidSpecError("descriptor fields are inconsistent with the named architecture")
        return desc


def _scale(c, width_mult):
    return max(1, int(round(c * width_mult)))


def describe(name, width_mult=1.0, input_hw=224, dropout=None):
    """Descriptor for a named architecture.

    ``dropout`` overrides the head dropout rates (three for the modified
    ResNet, one for cnn5).
    """
    if width_mult <= 0:
        raise InvalidSpecError(f"width_mult must be positive, got {width_mult}")
    if input_hw < 1:
        raise ShapeError(f"input size must be positive, got {input_hw}")
    w = lambda c: _scale(c, width_mult)  # noqa: E731

    if name == "modified-resnet":
        if input_hw % 32:
            raise ShapeError(f"modified ResNet input size must be divisible by 32, got {input_hw}")
        mids = (64, 128, 256, 512)
        stages = tuple(
            StageSpec("bottleneck", n, w(m), w(4 * m), 1 if i == 0 else 2)
            for i, (n, m) in enumerate(zip(MODIFIED_RESNET_BLOCKS, mids))
        )
        rates = HEAD_DROPOUT if dropout is None else tuple(dropout)
        if len(rates) != 3:
            raise InvalidSpecError(f"modified ResNet head needs 3 dropout rates, got {rates}")
        return ArchDescriptor(
            name, input_hw, width_mult, stem=(w(64), 3, 2), stages=stages,
            fc_widths=(w(2048), w(512), w(128), 1), dropout=rates,
        )

    if name.startswith("resnet"):
        try:
            depth = int(name[6:])
            kind, counts = RESNET_DEPTHS[depth]
        except (ValueError, KeyError):
            raise InvalidSpecError(f"unsupported ResNet depth in {name!r}; choose from {sorted(RESNET_DEPTHS)}") from None
        if input_hw % 32:
            raise ShapeError(f"ResNet input size must be divisible by 32, got {input_hw}")
        expansion = 1 if kind == "basic" else 4
        stages = tuple(
            StageSpec(kind, n, w(m), w(m * expansion), 1 if i == 0 else 2)
            for i, (n, m) in enumerate(zip(counts, (64, 128, 256, 512)))
        )
        return ArchDescriptor(name, input_hw, width_mult, stem=(w(64), 7, 2), stages=stages, fc_widths=(1,))

    if name == "logreg":
        return ArchDescriptor(name, input_hw, width_mult, fc_widths=(1,))

    if name == "ffnn4":
        return ArchDescriptor(name, input_hw, width_mult, fc_widths=tuple(w(c) for c in FFNN4_WIDTHS) + (1,))

    if name == "cnn5":
        if input_hw % 32:
            raise ShapeError(f"cnn5 input size must be divisible by 32, got {input_hw}")
        rates = (0.5,) if dropout is None else tuple(dropout)
        if len(rates) != 1:
            raise InvalidSpecError(f"cnn5 head needs 1 dropout rate, got {rates}")
        return ArchDescriptor(
            name, input_hw, width_mult, conv_channels=tuple(w(c) for c in CNN5_CHANNELS),
            fc_widths=(w(CNN5_HIDDEN), 1), dropout=rates,
        )

    raise InvalidSpecError(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}")


class Model(Sequential):
    """Top-level network: named layers plus mode flag and descriptor.

    ``rng`` is the dropout stream used when a forward pass is not handed
    its own generator.
    """

    kind = "model"

    def __init__(self, layers, descriptor=None, seed=0):
        super().__init__(layers)
        self.descriptor = descriptor
        self.mode = "train"
        self.rng = make_rng(seed)

    @property
    def input_shape(self):
        return None if self.descriptor is None else self.descriptor.input_shape

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def parameters(self):
        return self.named_parameters()

    def state_arrays(self):
        """Parameters and buffers under disjoint ``param.``/``buffer.`` prefixes."""
        out = {f"param.{k}": v for k, v in self.named_parameters().items()}
        out.update({f"buffer.{k}": v for k, v in self.named_buffers().items()})
        return out

    def num_parameters(self):
        return sum(p.size for p in self.named_parameters().values())

    def __repr__(self):
        name = self.descriptor.name if self.descriptor else "custom"
        return f"Model({name}, {len(self.layers)} layers, {self.num_parameters()} parameters)"


def _conv_bn(cin, cout, k, stride, rng, dtype):
    spec = Conv2dSpec(cin, cout, k, stride, k // 2, bias=False)
    return [("conv", Conv2d(spec, rng, dtype)), ("bn", BatchNorm2d(cout, dtype=dtype))]


def build_block(block, rng=None, dtype=DTYPE):
    """Residual block: bottleneck 1x1-3x3-1x1 or basic 3x3-3x3.

    Stride sits on the 3x3 convolution. A 1x1 conv + batchnorm projection
    replaces the identity shortcut when stride or channel count changes.
    """
    b = block
    if b.kind == "bottleneck":
        convs = [
            (b.in_channels, b.mid_channels, 1, 1),
            (b.mid_channels, b.mid_channels, 3, b.stride),
            (b.mid_channels, b.out_channels, 1, 1),
        ]
    elif b.kind == "basic":
        convs = [(b.in_channels, b.out_channels, 3, b.stride), (b.out_channels, b.out_channels, 3, 1)]
    else:
        raise InvalidSpecError(f"unknown block kind {b.kind!r}")
    layers = []
    for i, (cin, cout, k, s) in enumerate(convs, 1):
        (_, conv), (_, bn) = _conv_bn(cin, cout, k, s, rng, dtype)
        layers += [(f"conv{i}", conv), (f"bn{i}", bn)]
        if i < len(convs):
            layers.append((f"relu{i}", ReLU()))
    shortcut = None
    if b.projection:
        shortcut = Sequential(_conv_bn(b.in_channels, b.out_channels, 1, b.stride, rng, dtype))
    return ResidualBlock(Sequential(layers), shortcut)


def _fc(cin, cout, rng, dtype, act=None, p=None):
    layers = [("linear", Linear(cin, cout, rng=rng, dtype=dtype))]
    if act == "relu":
        layers.append(("relu", ReLU()))
    elif act == "sigmoid":
        layers.append(("sigmoid", Sigmoid()))
    if p is not None:
        layers.append(("dropout", Dropout(p)))
    return Sequential(layers)


def build(desc, seed=0, dtype=DTYPE):
    """Materialize a descriptor into a :class:`Model` with fresh weights."""
    rng = make_rng(seed)
    layers = []
    c, h = desc.in_channels, desc.input_hw
    if desc.stem:
        ch, k, s = desc.stem
        spec = Conv2dSpec(c, ch, k, s, k // 2, bias=False)
        layers.append(("stem", Sequential([
            ("conv", Conv2d(spec, rng, dtype)), ("bn", BatchNorm2d(ch, dtype=dtype)), ("relu", ReLU()),
        ])))
        layers.append(("maxpool", MaxPool2d()))
        blocks = iter(desc.blocks())
        for i, st in enumerate(desc.stages, 1):
            layers.append((f"layer{i}", Sequential(
                [(str(j), build_block(next(blocks), rng, dtype)) for j in range(st.blocks)]
            )))
        layers.append(("avgpool", AdaptiveAvgPool2d()))
        c, h = desc.stages[-1].out_channels, 1
    elif desc.conv_channels:
        for i, ch in enumerate(desc.conv_channels, 1):
            layers.append((f"conv{i}", Sequential(
                _conv_bn(c, ch, 3, 1, rng, dtype) + [("relu", ReLU()), ("pool", MaxPool2d())]
            )))
            c, h = ch, h // 2
    layers.append(("flatten", Flatten()))

    features = c * h * h
    widths = desc.fc_widths
    for i, width in enumerate(widths):
        last = i == len(widths) - 1
        p = None if last or i >= len(desc.dropout) else desc.dropout[i]
        name = f"fc{i + 1}" if len(widths) > 1 else "fc"
        layers.append((name, _fc(features, width, rng, dtype, "sigmoid" if last else "relu", p)))
        features = width
    return Model(layers, desc, seed)


def build_modified_resnet(width_mult=1.0, input_hw=224, seed=0, dtype=DTYPE, dropout=None):
    return build(describe("modified-resnet", width_mult, input_hw, dropout), seed, dtype)


def build_resnet_family(depth, width_mult=1.0, input_hw=224, seed=0, dtype=DTYPE):
    if depth not in RESNET_DEPTHS:
        raise InvalidSpecError(f"unsupported ResNet depth {depth}; choose from {sorted(RESNET_DEPTHS)}")
    return build(describe(f"resnet{depth}", width_mult, input_hw), seed, dtype)


def build_baseline(kind, input_hw=224, width_mult=1.0, seed=0, dtype=DTYPE, dropout=None):
    if kind not in ("logreg", "ffnn4", "cnn5"):
        raise InvalidSpecError(f"unknown baseline {kind!r}; choose from logreg, ffnn4, cnn5")
    return build(describe(kind, width_mult, input_hw, dropout), seed, dtype)


def build_by_name(name, width_mult=1.0, input_hw=224, seed=0, dtype=DTYPE):
    return build(describe(name, width_mult, input_hw), seed, dtype)


def _weight_layers(layer, skip_shortcut=True):
    if isinstance(layer, (Conv2d, Linear)):
        yield layer
    for name, child in layer.children():
        if skip_shortcut and isinstance(layer, ResidualBlock) and name == "shortcut":
            continue
        yield from _weight_layers(child, skip_shortcut)


def count_weight_layers(model):
    """Convolution and linear layers on the main path.

    Batchnorm layers and projection-shortcut convolutions are not counted.
    """
    return sum(1 for _ in _weight_layers(model))


def descriptor_weight_layers(desc):
    """Same count as :func:`count_weight_layers`, from the descriptor alone."""
    n = 1 if desc.stem else 0
    n += sum(2 if b.kind == "basic" else 3 for b in desc.blocks())
    n += len(desc.conv_channels)
    return n + len(desc.fc_widths)


def classify(prob, threshold=0.5):
    """Class 1 (MSS) when the predicted probability reaches ``threshold``, else 0 (MSI)."""
    return (np.asarray(prob) >= threshold).astype(np.int64).reshape(-1)


def forward_classify(model, batch):
    """Eval-mode prediction: ``(prob [N, 1], class [N])``.

    ``prob`` is the predicted probability of class 1 (MSS).
    """
    from .autograd import forward_record

    prob, _ = forward_record(model, batch, mode="eval")
    if prob.ndim != 2 or prob.shape[1] != 1:
        raise ShapeError(f"classifier output must be [N, 1], got {prob.shape}")
    return prob, classify(prob)
