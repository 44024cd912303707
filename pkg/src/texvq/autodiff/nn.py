"""Small layer library on top of the primitives."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Module:
    """Parameter container; attributes that are Tensors, Modules or lists of Modules are walked in order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.is_leaf:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters().values():
            p.requires_grad = flag
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.parameters().items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key!r} in checkpoint")
            if arrays[key].shape != p.shape:
                raise ValueError(f"parameter {key!r}: checkpoint shape {arrays[key].shape} != {p.shape}")
            p.data = arrays[key].astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(get_default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3, stride: int = 1,
                 gain: float = math.sqrt(2.0), zero: bool = False):
        fan_in = cin * k * k
        w = np.zeros((cout, cin, k, k)) if zero else rng.normal(0.0, gain / math.sqrt(fan_in), (cout, cin, k, k))
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout))
        self.stride = stride
        self.pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ResBlock(Module):
    """x + conv(act(conv(act(x)))), second conv scaled down at init."""

    def __init__(self, rng: np.random.Generator, ch: int):
        self.conv1 = Conv2d(rng, ch, ch)
        self.conv2 = Conv2d(rng, ch, ch, gain=0.1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.leaky_relu(x))
        h = self.conv2(F.leaky_relu(h))
        return x + h


class SelfAttention(Module):
    """Single-head dot-product attention over the spatial positions of a feature map."""

    def __init__(self, rng: np.random.Generator, ch: int):
        self.q = Conv2d(rng, ch, ch, k=1, gain=1.0)
        self.k = Conv2d(rng, ch, ch, k=1, gain=1.0)
        self.v = Conv2d(rng, ch, ch, k=1, gain=1.0)
        self.proj = Conv2d(rng, ch, ch, k=1, gain=0.1)
        self.scale = 1.0 / math.sqrt(ch)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        q = F.reshape(self.q(x), (n, c, h * w))
        k = F.reshape(self.k(x), (n, c, h * w))
        v = F.reshape(self.v(x), (n, c, h * w))
        scores = F.matmul(F.transpose(q, (0, 2, 1)), k) * self.scale  # (n, T, T)
        attn = F.softmax(scores, axis=-1)
        out = F.matmul(v, F.transpose(attn, (0, 2, 1)))
        return x + self.proj(F.reshape(out, (n, c, h, w)))


class Downsample(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int):
        self.conv = Conv2d(rng, cin, cout, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.leaky_relu(x))


class Upsample(Module):
    """2x up via a stride-2, 4x4 transposed conv.

    Unlike nearest-neighbour upsampling plus a conv, the four output phases get
    their own weights, so a spatially constant input can still produce a
    pattern with period 2 (and, stacked, any period dividing the total factor).
    """

    def __init__(self, rng: np.random.Generator, cin: int, cout: int):
        # each output pixel sees a 2x2 input window per channel
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0) / math.sqrt(4 * cin), (cin, cout, 4, 4)))
        self.bias = _param(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return F.transposed_conv2d(F.leaky_relu(x), self.weight, self.bias, stride=2, pad=1)
