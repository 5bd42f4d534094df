"""3D U-Net builders: plain and residual encoder/decoder variants.

One builder covers the translation networks (1-channel linear regression
head) and the compact 7-class segmentation network used both for feature
extraction and for label-based evaluation. Decoder stage outputs are the
feature tap sites.
"""

import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import ops
from .tensor import Tensor
from .volume import Volume

CLASS_MAPPING = {
    "organs": 1,
    "cardiac": 2,
    "muscles": 3,
    "bones": 4,
    "ribs": 5,
    "vertebrae": 6,
}
N_CLASSES = 7  # background + the six merged groups

BLOCKS = ("plain", "residual")
UPSAMPLES = ("transposed_conv", "conv_trilinear")
HEADS = ("regression_1ch", "segmentation_7ch")


@dataclass(frozen=True)
class NetworkSpec:
    levels: int = 3
    base_channels: int = 8
    channel_cap: int = 64
    block: str = "plain"
    upsample: str = "transposed_conv"
    head: str = "regression_1ch"
    input_channels: int = 1
    global_skip: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.block not in BLOCKS:
            raise ValueError(f"block must be one of {BLOCKS}")
        if self.upsample not in UPSAMPLES:
            raise ValueError(f"upsample must be one of {UPSAMPLES}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.global_skip and self.head != "regression_1ch":
            raise ValueError("global skip needs a single-channel head")

    def channels(self, level):
        return min(self.base_channels * (2 ** level), self.channel_cap)

    @property
    def out_channels(self):
        return 1 if self.head == "regression_1ch" else N_CLASSES

    def validate_patch(self, patch_dims):
        div = 2 ** (self.levels - 1)
        for d in patch_dims:
            if d % div != 0:
                raise ValueError(
                    f"patch dims {tuple(patch_dims)} not divisible by {div} "
                    f"(levels={self.levels})"
                )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class _Conv:
    def __init__(self, net, name, cin, cout, k, stride=(1, 1, 1), padding=None, bias=True):
        if padding is None:
            padding = tuple(kk // 2 for kk in k)
        self.stride, self.padding = stride, padding
        fan_in = cin * k[0] * k[1] * k[2]
        std = np.sqrt(2.0 / fan_in)
        w = net._rng.standard_normal((cout, cin) + tuple(k)) * std
        self.w = net._register(f"{name}.w", w)
        self.b = net._register(f"{name}.b", np.zeros(cout)) if bias else None

    def __call__(self, x):
        return ops.conv3d(x, self.w, self.b, self.stride, self.padding)


class _TConv:
    def __init__(self, net, name, cin, cout, k=(2, 2, 2), stride=(2, 2, 2)):
        self.stride = stride
        fan_in = cin * k[0] * k[1] * k[2]
        std = np.sqrt(2.0 / fan_in)
        w = net._rng.standard_normal((cout, cin) + tuple(k)) * std
        self.w = net._register(f"{name}.w", w)
        self.b = net._register(f"{name}.b", np.zeros(cout))

    def __call__(self, x):
        return ops.tconv3d(x, self.w, self.b, self.stride, (0, 0, 0))


class _Norm:
    def __init__(self, net, name, ch):
        self.g = net._register(f"{name}.g", np.ones(ch))
        self.b = net._register(f"{name}.b", np.zeros(ch))

    def __call__(self, x):
        return ops.instance_norm(x, self.g, self.b)


class _Block:
    """conv-IN-lrelu x2; residual adds an identity or projected skip."""

    def __init__(self, net, name, cin, cout, residual):
        k = (3, 3, 3)
        self.residual = residual
        self.conv1 = _Conv(net, f"{name}.conv1", cin, cout, k)
        self.norm1 = _Norm(net, f"{name}.norm1", cout)
        self.conv2 = _Conv(net, f"{name}.conv2", cout, cout, k)
        self.norm2 = _Norm(net, f"{name}.norm2", cout)
        self.proj = None
        if residual and cin != cout:
            self.proj = _Conv(net, f"{name}.proj", cin, cout, (1, 1, 1), bias=False)

    def __call__(self, x):
        h = ops.leaky_relu(self.norm1(self.conv1(x)))
        h = ops.leaky_relu(self.norm2(self.conv2(h)))
        if not self.residual:
            return h
        skip = self.proj(x) if self.proj is not None else x
        return ops.add(skip, h)


class _Down:
    """Strided 3x3x3 conv halving each spatial dim, with norm/activation."""

    def __init__(self, net, name, cin, cout):
        self.conv = _Conv(net, f"{name}.conv", cin, cout, (3, 3, 3), stride=(2, 2, 2))
        self.norm = _Norm(net, f"{name}.norm", cout)

    def __call__(self, x):
        return ops.leaky_relu(self.norm(self.conv(x)))


class _Up:
    """Doubling upsample: transposed conv, or trilinear + 3x3x3 conv."""

    def __init__(self, net, name, cin, cout, mode):
        self.mode = mode
        if mode == "transposed_conv":
            self.op = _TConv(net, f"{name}.tconv", cin, cout)
        else:
            self.op = _Conv(net, f"{name}.conv", cin, cout, (3, 3, 3))

    def __call__(self, x):
        if self.mode == "transposed_conv":
            return self.op(x)
        return self.op(ops.trilinear_upsample2x(x))


class Network:
    """Encoder/decoder network with named parameters in fixed order."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = int(seed)
        self.params = {}
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        res = spec.block == "residual"
        L = spec.levels

        self.enc = [_Block(self, "enc0", spec.input_channels, spec.channels(0), res)]
        self.down = []
        for i in range(1, L):
            self.down.append(_Down(self, f"down{i}", spec.channels(i - 1), spec.channels(i)))
            self.enc.append(_Block(self, f"enc{i}", spec.channels(i), spec.channels(i), res))
        self.up = []
        self.dec = []
        for i in range(L - 2, -1, -1):
            self.up.append(_Up(self, f"up{i}", spec.channels(i + 1), spec.channels(i), spec.upsample))
            self.dec.append(_Block(self, f"dec{i}", 2 * spec.channels(i), spec.channels(i), res))
        self.head = _Conv(self, "head", spec.channels(0), spec.out_channels, (1, 1, 1))
        del self._rng

    def _register(self, name, values):
        t = Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self):
        return self.params

    def parameter_count(self):
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
        return self

    def astype(self, dtype):
        for t in self.params.values():
            t.values = t.values.astype(dtype)
        return self

    @property
    def n_taps(self):
        return self.spec.levels - 1

    def forward(self, x, capture_taps=False):
        """Returns (y, taps). Taps are decoder block outputs, deepest first."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self.spec.validate_patch(x.shape[2:])
        skips = []
        h = self.enc[0](x)
        for i in range(1, self.spec.levels):
            skips.append(h)
            h = self.enc[i](self.down[i - 1](h))
        taps = []
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = dec(ops.concat_channels(up(h), skip))
            if capture_taps:
                taps.append(h)
        y = self.head(h)
        if self.spec.global_skip:
            y = ops.add(y, x)
        return y, taps

    def backward(self, y, grad_y):
        """Drive the tape from a forward output; grads land on .params[...].grad."""
        y.backward(np.asarray(grad_y, dtype=y.values.dtype))
        return {name: t.grad for name, t in self.params.items()}


def build(spec, seed=0):
    return Network(spec, seed=seed)


def merge_labels(raw, mapping, on_unmapped="zero"):
    """Map a many-class label volume onto the compact 0..6 classes.

    mapping: raw integer value -> compact class id (0..6) or group name
    from CLASS_MAPPING. Unmapped nonzero values map to background with a
    warning ("zero", default) or raise ("error").
    """
    lut = {}
    for raw_val, target in mapping.items():
        if isinstance(target, str):
            if target not in CLASS_MAPPING:
                raise ValueError(f"unknown class name {target!r}")
            target = CLASS_MAPPING[target]
        if not 0 <= int(target) < N_CLASSES:
            raise ValueError(f"class id {target} outside 0..{N_CLASSES - 1}")
        lut[int(raw_val)] = int(target)
    data = np.asarray(raw.data)
    out = np.zeros(data.shape, dtype=np.uint8)
    unmapped = set()
    for val in np.unique(data):
        v = int(val)
        if v in lut:
            out[data == val] = lut[v]
        elif v != 0:
            unmapped.add(v)
    if unmapped:
        msg = f"unmapped raw labels {sorted(unmapped)} -> background"
        if on_unmapped == "error":
            raise ValueError(msg)
        warnings.warn(msg)
    return Volume(out, raw.spacing_mm, raw.origin_mm)
