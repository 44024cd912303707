"""Thin named wrappers over the primitives, plus a few composites."""

from __future__ import annotations

from typing import Sequence

from .tensor import Tensor, primitive_apply


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_apply("matmul", (a, b))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    inputs = (x, w) if b is None else (x, w, b)
    return primitive_apply("conv2d", inputs, stride=stride, pad=pad)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    inputs = (x, w) if b is None else (x, w, b)
    return primitive_apply("transposed_conv2d", inputs, stride=stride, pad=pad)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    return primitive_apply("nearest_upsample", (x,), factor=factor)


def avg_downsample(x: Tensor, factor: int = 2) -> Tensor:
    return primitive_apply("avg_downsample", (x,), factor=factor)


def relu(x: Tensor) -> Tensor:
    return primitive_apply("relu", (x,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return primitive_apply("leaky_relu", (x,), slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return primitive_apply("sigmoid", (x,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return primitive_apply("softmax", (x,), axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log(softmax(x)); finite even where softmax underflows."""
    return primitive_apply("log_softmax", (x,), axis=axis)


def log(x: Tensor) -> Tensor:
    return primitive_apply("log", (x,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return primitive_apply("reshape", (x,), shape=tuple(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return primitive_apply("transpose", (x,), axes=tuple(axes))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return primitive_apply("concat", tuple(xs), axis=axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return primitive_apply("reduce_sum", (x,), axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return primitive_apply("reduce_mean", (x,), axis=axis, keepdims=keepdims)


def straight_through(soft: Tensor, hard: Tensor) -> Tensor:
    return primitive_apply("straight_through", (soft, hard))


def square(x: Tensor) -> Tensor:
    return x * x


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return reduce_mean(d * d)


def image_gradients(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along width and height of an ``(..., H, W)`` tensor."""
    dx = x[..., :, 1:] - x[..., :, :-1]
    dy = x[..., 1:, :] - x[..., :-1, :]
    return dx, dy
