"""Dense tensors with a reverse-mode tape.

Every differentiable computation goes through :func:`primitive_apply`, which
looks the op up in ``PRIMITIVES``, runs its numpy forward and, when any input
requires a gradient, links the output to a :class:`Node` holding whatever the
backward rule needs.  :func:`backward` orders those nodes topologically (the
tape) and pushes gradients to the leaves.

Broadcasting is deliberately absent: binary ops need equal shapes, with the
single exception of a python scalar passed through the ``scalar`` attribute.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_state = threading.local()


class ShapeError(ValueError):
    """Input extents incompatible with the requested primitive."""


class UnknownOpError(KeyError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op_kind: str
    inputs: tuple["Tensor", ...]
    ctx: Any
    attrs: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return primitive_apply("add", (self, other))
        return primitive_apply("add", (self,), scalar=float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return primitive_apply("mul", (self, other))
        return primitive_apply("mul", (self,), scalar=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return primitive_apply("mul", (self,), scalar=-1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return primitive_apply("add", (self, -other))
        return primitive_apply("add", (self,), scalar=-float(other))

    def __rsub__(self, other):
        return primitive_apply("add", (-self,), scalar=float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return primitive_apply("mul", (self,), scalar=1.0 / float(other))

    def __matmul__(self, other):
        return primitive_apply("matmul", (self, other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return primitive_apply("reshape", (self,), shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return primitive_apply("transpose", (self,), axes=tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return primitive_apply("reduce_sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return primitive_apply("reduce_mean", (self,), axis=axis, keepdims=keepdims)

    def __getitem__(self, index):
        return primitive_apply("slice", (self,), index=_normalize_index(index))


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _normalize_index(index) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not isinstance(part, (slice, int)) and part is not Ellipsis:
            raise TypeError(f"slice supports basic indexing only, got {type(part).__name__}")
    return index


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


# ----------------------------------------------------------------------
# primitive registry
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    arity: int | None  # None means variadic
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, arity: int | None):
    def deco(cls):
        PRIMITIVES[name] = Primitive(arity, cls.forward, cls.backward)
        return cls

    return deco


def primitive_apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run ``op_kind`` on ``inputs`` and record it when gradients are needed."""
    try:
        prim = PRIMITIVES[op_kind]
    except KeyError:
        raise UnknownOpError(f"unknown op_kind {op_kind!r}") from None
    inputs = tuple(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op_kind}: inputs must be Tensors, got {type(t).__name__}")
    if prim.arity is not None and len(inputs) != prim.arity:
        # conv ops accept an optional bias
        if not (op_kind in ("conv2d", "transposed_conv2d") and len(inputs) == 3):
            raise ShapeError(f"{op_kind}: expected {prim.arity} inputs, got {len(inputs)}")
    out_data, ctx = prim.forward(*[t.data for t in inputs], **attrs)
    out = Tensor(out_data, dtype=out_data.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op_kind, inputs, ctx, attrs)
    return out


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@_register("add", None)
class _Add:
    @staticmethod
    def forward(a, b=None, scalar=None):
        if b is None:
            if scalar is None:
                raise ShapeError("add: needs a second tensor or a scalar")
            return a + a.dtype.type(scalar), None
        _same_shape("add", a, b)
        return a + b, None

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        return (g,) * n_inputs


@_register("mul", None)
class _Mul:
    @staticmethod
    def forward(a, b=None, scalar=None):
        if b is None:
            if scalar is None:
                raise ShapeError("mul: needs a second tensor or a scalar")
            return a * a.dtype.type(scalar), (None, None)
        _same_shape("mul", a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        a, b = ctx
        if n_inputs == 1:
            return (g * g.dtype.type(attrs["scalar"]),)
        return g * b, g * a


@_register("matmul", 2)
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: incompatible extents {a.shape} @ {b.shape}")
        return np.matmul(a, b), (a, b)

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        a, b = ctx
        return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (N, C*kh*kw, Ho*Wo) patches back to (N, C, H, W)."""
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def _check_conv(op: str, x, w, b, cin_axis: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{op}: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(f"{op}: input channels {x.shape[1]} != kernel channels {w.shape[cin_axis]}")
    if b is not None and b.shape != (w.shape[1 - cin_axis],):
        raise ShapeError(f"{op}: bias shape {b.shape} != ({w.shape[1 - cin_axis]},)")


def _weight_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_n a[n] @ b[n].T for a (N, P, L), b (N, Q, L)."""
    acc = a[0] @ b[0].T
    for k in range(1, a.shape[0]):
        acc += a[k] @ b[k].T
    return acc


@_register("conv2d", 2)
class _Conv2d:
    @staticmethod
    def forward(x, w, b=None, stride=1, pad=0):
        _check_conv("conv2d", x, w, b, 1)
        o, c, kh, kw = w.shape
        if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
        cols, ho, wo = _im2col(x, kh, kw, stride, pad)
        wm = w.reshape(o, -1)
        out = np.matmul(wm, cols)
        if b is not None:
            out += b.reshape(1, o, 1)
        return out.reshape(x.shape[0], o, ho, wo), (cols, wm, x.shape, w.shape, ho, wo, b is not None)

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        cols, wm, xshape, wshape, ho, wo, has_bias = ctx
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        gm = g.reshape(g.shape[0], wshape[0], ho * wo)
        dw = _weight_grad(gm, cols).reshape(wshape)
        dx = _col2im(np.matmul(wm.T, gm), xshape, wshape[2], wshape[3], stride, pad, ho, wo)
        if has_bias:
            return dx, dw, gm.sum(axis=(0, 2))
        return dx, dw


@_register("transposed_conv2d", 2)
class _TransposedConv2d:
    """Adjoint of conv2d; kernel layout is (in_channels, out_channels, kh, kw)."""

    @staticmethod
    def forward(x, w, b=None, stride=1, pad=0):
        _check_conv("transposed_conv2d", x, w, b, 0)
        n, cin, h, wd = x.shape
        _, cout, kh, kw = w.shape
        ho, wo = (h - 1) * stride - 2 * pad + kh, (wd - 1) * stride - 2 * pad + kw
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"transposed_conv2d: padding {pad} leaves no output for input {x.shape}")
        xm = x.reshape(n, cin, h * wd)
        wm = w.reshape(cin, -1)
        out = _col2im(np.matmul(wm.T, xm), (n, cout, ho, wo), kh, kw, stride, pad, h, wd)
        if b is not None:
            out += b.reshape(1, -1, 1, 1)
        return out, (xm, wm, x.shape, w.shape, b is not None)

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        xm, wm, xshape, wshape, has_bias = ctx
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        cols, h, wd = _im2col(g, wshape[2], wshape[3], stride, pad)
        assert (h, wd) == xshape[2:]
        dx = np.matmul(wm, cols).reshape(xshape)
        dw = _weight_grad(xm, cols).reshape(wshape)
        if has_bias:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw


@_register("nearest_upsample", 1)
class _NearestUpsample:
    @staticmethod
    def forward(x, factor=2):
        if x.ndim < 2:
            raise ShapeError(f"nearest_upsample: needs >=2 dims, got {x.shape}")
        return x.repeat(factor, axis=-2).repeat(factor, axis=-1), None

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        f = attrs.get("factor", 2)
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // f, f, w // f, f).sum(axis=(-3, -1)),)


@_register("avg_downsample", 1)
class _AvgDownsample:
    @staticmethod
    def forward(x, factor=2):
        *lead, h, w = x.shape
        if h % factor or w % factor:
            raise ShapeError(f"avg_downsample: factor {factor} does not divide spatial extents {(h, w)}")
        return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1)), None

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        f = attrs.get("factor", 2)
        scale = g.dtype.type(1.0 / (f * f))
        return (g.repeat(f, axis=-2).repeat(f, axis=-1) * scale,)


@_register("relu", 1)
class _Relu:
    @staticmethod
    def forward(x):
        mask = x > 0
        return np.where(mask, x, x.dtype.type(0)), mask

    @staticmethod
    def backward(mask, g, attrs, n_inputs):
        return (g * mask,)


@_register("leaky_relu", 1)
class _LeakyRelu:
    @staticmethod
    def forward(x, slope=0.2):
        slope_arr = np.where(x > 0, x.dtype.type(1), x.dtype.type(slope))
        return x * slope_arr, slope_arr

    @staticmethod
    def backward(slope_arr, g, attrs, n_inputs):
        return (g * slope_arr,)


@_register("sigmoid", 1)
class _Sigmoid:
    @staticmethod
    def forward(x):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    @staticmethod
    def backward(y, g, attrs, n_inputs):
        return (g * y * (1 - y),)


@_register("softmax", 1)
class _Softmax:
    @staticmethod
    def forward(x, axis=-1):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)
        return y, y

    @staticmethod
    def backward(y, g, attrs, n_inputs):
        axis = attrs.get("axis", -1)
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@_register("log_softmax", 1)
class _LogSoftmax:
    @staticmethod
    def forward(x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        return y, y

    @staticmethod
    def backward(y, g, attrs, n_inputs):
        axis = attrs.get("axis", -1)
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


@_register("log", 1)
class _Log:
    @staticmethod
    def forward(x):
        return np.log(x), x

    @staticmethod
    def backward(x, g, attrs, n_inputs):
        return (g / x,)


@_register("reshape", 1)
class _Reshape:
    @staticmethod
    def forward(x, shape):
        try:
            return x.reshape(shape), x.shape
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None

    @staticmethod
    def backward(in_shape, g, attrs, n_inputs):
        return (g.reshape(in_shape),)


@_register("transpose", 1)
class _Transpose:
    @staticmethod
    def forward(x, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
        return np.ascontiguousarray(x.transpose(axes)), None

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        return (np.ascontiguousarray(g.transpose(np.argsort(attrs["axes"]))),)


@_register("concat", None)
class _Concat:
    @staticmethod
    def forward(*xs, axis=0):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
                raise ShapeError(f"concat: extents {x.shape} incompatible with {ref} on axis {axis}")
        return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]

    @staticmethod
    def backward(sizes, g, attrs, n_inputs):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=attrs.get("axis", 0)))


@_register("slice", 1)
class _Slice:
    @staticmethod
    def forward(x, index):
        try:
            out = x[index]
        except IndexError as exc:
            raise ShapeError(f"slice: {exc} for shape {x.shape}") from None
        return np.array(out), x.shape

    @staticmethod
    def backward(in_shape, g, attrs, n_inputs):
        dx = np.zeros(in_shape, dtype=g.dtype)
        dx[attrs["index"]] = g
        return (dx,)


def _expand_reduced(g: np.ndarray, in_shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(in_shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


@_register("reduce_sum", 1)
class _ReduceSum:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), x.shape

    @staticmethod
    def backward(in_shape, g, attrs, n_inputs):
        return (np.array(_expand_reduced(g, in_shape, attrs.get("axis"), attrs.get("keepdims", False))),)


@_register("reduce_mean", 1)
class _ReduceMean:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), x.shape

    @staticmethod
    def backward(in_shape, g, attrs, n_inputs):
        axis = attrs.get("axis")
        if axis is None:
            count = int(np.prod(in_shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([in_shape[a] for a in axes]))
        g = _expand_reduced(g, in_shape, axis, attrs.get("keepdims", False))
        return (g * g.dtype.type(1.0 / count),)


@_register("straight_through", 2)
class _StraightThrough:
    """Forward the second input's value, route the gradient to the first.

    Same gradient as ``soft + detach(hard - soft)`` but the forward value is
    ``hard`` bit-for-bit, which the float expression does not guarantee.
    """

    @staticmethod
    def forward(soft, hard):
        _same_shape("straight_through", soft, hard)
        return hard.copy(), None

    @staticmethod
    def backward(ctx, g, attrs, n_inputs):
        return g, None


# ----------------------------------------------------------------------
# tape and backward
# ----------------------------------------------------------------------


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of non-leaf tensors reachable from ``loss``.

    Every tensor appears after all of its inputs.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in reversed(t.node.inputs):
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones((), loss.dtype) if loss.grad is None else loss.grad + 1
            return
        raise ValueError("backward: loss is not connected to any tensor requiring grad")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        prim = PRIMITIVES[node.op_kind]
        in_grads = prim.backward(node.ctx, g, node.attrs, len(node.inputs))
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                ig = np.asarray(ig, dtype=inp.dtype)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig


def detach(x: Tensor) -> Tensor:
    """Value-sharing view of ``x`` that is cut out of the tape."""
    out = Tensor(x.data, dtype=x.dtype)
    out.requires_grad = False
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)
