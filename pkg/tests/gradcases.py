"""Random single-primitive and chained graphs for finite-difference checks."""

from __future__ import annotations

import numpy as np

from texvq.autodiff import Tensor
from texvq.autodiff import functional as F

CHECKED_PRIMITIVES = (
    "matmul", "conv2d", "transposed_conv2d", "nearest_upsample", "avg_downsample", "add", "mul",
    "relu", "leaky_relu", "sigmoid", "softmax", "log_softmax", "log", "reshape", "transpose", "concat", "slice",
    "reduce_sum", "reduce_mean",
)


def _leaf(rng, shape, low=-1.0, high=1.0, away_from_zero=False):
    data = rng.uniform(low, high, size=shape)
    if away_from_zero:
        data = np.where(np.abs(data) < 0.05, np.sign(data + 1e-12) * 0.05 + data, data)
    return Tensor(data.astype(np.float64), requires_grad=True)


def _weighted_sum(rng, out: Tensor):
    weight = Tensor(rng.normal(size=out.shape))
    return F.reduce_sum(out * weight)


def build_case(op: str, rng: np.random.Generator):
    """Return (fn, leaves) where fn() rebuilds a scalar loss through ``op``."""
    r = lambda lo, hi: int(rng.integers(lo, hi + 1))  # noqa: E731
    if op == "matmul":
        batch = (r(1, 2),) if rng.random() < 0.5 else ()
        m, k, n = r(1, 4), r(1, 4), r(1, 4)
        a, b = _leaf(rng, batch + (m, k)), _leaf(rng, batch + (k, n))
        leaves, body = [a, b], lambda: F.matmul(a, b)
    elif op in ("conv2d", "transposed_conv2d"):
        n, cin, cout = r(1, 2), r(1, 3), r(1, 3)
        k, stride, pad = r(1, 3), r(1, 2), r(0, 1)
        h, w = r(max(k, 3), 6), r(max(k, 3), 6)
        x = _leaf(rng, (n, cin, h, w))
        wshape = (cout, cin, k, k) if op == "conv2d" else (cin, cout, k, k)
        wt, b = _leaf(rng, wshape), _leaf(rng, (cout,))
        fn = F.conv2d if op == "conv2d" else F.transposed_conv2d
        if op == "transposed_conv2d" and (h - 1) * stride - 2 * pad + k <= 0:
            pad = 0
        leaves, body = [x, wt, b], lambda: fn(x, wt, b, stride=stride, pad=pad)
    elif op == "nearest_upsample":
        f = r(2, 3)
        x = _leaf(rng, (r(1, 2), r(1, 2), r(1, 3), r(1, 3)))
        leaves, body = [x], lambda: F.nearest_upsample(x, f)
    elif op == "avg_downsample":
        f = r(2, 3)
        x = _leaf(rng, (r(1, 2), r(1, 2), f * r(1, 3), f * r(1, 3)))
        leaves, body = [x], lambda: F.avg_downsample(x, f)
    elif op in ("add", "mul"):
        shape = tuple(r(1, 4) for _ in range(r(1, 3)))
        a = _leaf(rng, shape)
        if rng.random() < 0.3:
            s = float(rng.normal())
            leaves, body = [a], (lambda: a + s) if op == "add" else (lambda: a * s)
        else:
            b = _leaf(rng, shape)
            leaves, body = [a, b], (lambda: a + b) if op == "add" else (lambda: a * b)
    elif op in ("relu", "leaky_relu", "sigmoid"):
        x = _leaf(rng, tuple(r(1, 4) for _ in range(r(1, 3))), -2, 2, away_from_zero=True)
        fn = {"relu": F.relu, "leaky_relu": F.leaky_relu, "sigmoid": F.sigmoid}[op]
        leaves, body = [x], lambda: fn(x)
    elif op in ("softmax", "log_softmax"):
        shape = tuple(r(1, 4) for _ in range(r(1, 3)))
        axis = r(0, len(shape) - 1)
        x = _leaf(rng, shape, -3, 3)
        fn = F.softmax if op == "softmax" else F.log_softmax
        leaves, body = [x], lambda: fn(x, axis=axis)
    elif op == "log":
        x = _leaf(rng, tuple(r(1, 4) for _ in range(r(1, 3))), 0.2, 3.0)
        leaves, body = [x], lambda: F.log(x)
    elif op == "reshape":
        x = _leaf(rng, (r(1, 3), r(1, 3), 2))
        shape = (x.size // 2, 2) if rng.random() < 0.5 else (x.size,)
        leaves, body = [x], lambda: F.reshape(x, shape)
    elif op == "transpose":
        x = _leaf(rng, tuple(r(1, 3) for _ in range(3)))
        axes = tuple(rng.permutation(3).tolist())
        leaves, body = [x], lambda: F.transpose(x, axes)
    elif op == "concat":
        axis = r(0, 1)
        base = [r(1, 3), r(1, 3)]
        parts = []
        for _ in range(r(2, 3)):
            shape = list(base)
            shape[axis] = r(1, 3)
            parts.append(_leaf(rng, tuple(shape)))
        leaves, body = parts, lambda: F.concat(parts, axis=axis)
    elif op == "slice":
        x = _leaf(rng, (r(2, 4), r(2, 5)))
        i0 = r(0, x.shape[0] - 1)
        j0, step = r(0, 1), r(1, 2)
        leaves, body = [x], lambda: x[i0:, j0::step]
    elif op in ("reduce_sum", "reduce_mean"):
        x = _leaf(rng, (r(1, 3), r(1, 3), r(1, 3)))
        axis = [None, 0, 1, 2, (0, 2)][r(0, 4)]
        keep = bool(r(0, 1))
        fn = F.reduce_sum if op == "reduce_sum" else F.reduce_mean
        leaves, body = [x], lambda: fn(x, axis=axis, keepdims=keep)
    else:
        raise KeyError(op)

    probe_shape = body().shape
    weight = Tensor(rng.normal(size=probe_shape))
    return (lambda: F.reduce_sum(body() * weight)), leaves


def build_chain(rng: np.random.Generator):
    """Conv -> leaky_relu -> avg_downsample -> reshape -> matmul -> softmax -> log chain."""
    x = _leaf(rng, (2, 2, 4, 4))
    w = _leaf(rng, (3, 2, 3, 3))
    b = _leaf(rng, (3,))
    m = _leaf(rng, (12, 5))
    weight = Tensor(rng.normal(size=(2, 5)))

    def fn():
        h = F.leaky_relu(F.conv2d(x, w, b, stride=1, pad=1))
        h = F.avg_downsample(h, 2)
        h = F.reshape(h, (2, 12))
        p = F.softmax(F.matmul(h, m), axis=-1)
        return F.reduce_sum(F.log(p) * weight)

    return fn, [x, w, b, m]
