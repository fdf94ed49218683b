"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on the active :class:`Tape` only while one is
entered and only when at least one input requires a gradient.  Outside a
tape every op is a plain numpy computation, which is what evaluation
rollouts rely on to stay memory-lean.

    with Tape():
        loss = (conv3d(x, w, b, pad=1) * y).sum()
    backward(loss)
"""

import contextvars
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from clopasim.config import settings

DEFAULT_DTYPE = np.float32
INSTANCE_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class AutodiffError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable ops; inputs always precede outputs."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("clopasim_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = DEFAULT_DTYPE) -> None:
        arr = np.array(data, dtype=dtype)
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError("tensor", f"extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise AutodiffError("tensor: non-finite values at construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._tape: Tape | None = None

    @classmethod
    def _result(
        cls,
        data: np.ndarray,
        op: str,
        inputs: tuple["Tensor", ...],
        backward_fn: BackwardFn,
    ) -> "Tensor":
        if settings.DEBUG and not np.all(np.isfinite(data)):
            raise AutodiffError(f"{op}: produced non-finite values")
        out = object.__new__(cls)
        out.data = data
        out.grad = None
        out._node = None
        out._tape = None
        tape = _ACTIVE_TAPE.get()
        out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            node = Node(op, inputs, out, backward_fn)
            tape.record(node)
            out._node = node
            out._tape = tape
        return out

    # --- introspection ---

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
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # --- arithmetic ---

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(_constant(other, self), self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(_constant(other, self), self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __getitem__(self, index: Any) -> "Tensor":
        return take(self, index)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_sum(self) / float(self.size)

    def log(self) -> "Tensor":
        return log(self)

    def clamp(self, low: float, high: float) -> "Tensor":
        return clamp(self, low, high)


def _constant(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.data.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise ---


def add(a: Tensor, b: Any) -> Tensor:
    b = _constant(b, a)

    def _backward(g: np.ndarray):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data + b.data, "add", (a, b), _backward)


def sub(a: Tensor, b: Any) -> Tensor:
    b = _constant(b, a)

    def _backward(g: np.ndarray):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data - b.data, "sub", (a, b), _backward)


def mul(a: Tensor, b: Any) -> Tensor:
    b = _constant(b, a)

    def _backward(g: np.ndarray):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data * b.data, "mul", (a, b), _backward)


def div(a: Tensor, b: Any) -> Tensor:
    b = _constant(b, a)

    def _backward(g: np.ndarray):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data / b.data, "div", (a, b), _backward)


def log(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (g / x.data,)

    return Tensor._result(np.log(x.data), "log", (x,), _backward)


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)

    def _backward(g: np.ndarray):
        return (g * inside,)

    return Tensor._result(np.clip(x.data, low, high), "clamp", (x,), _backward)


def reduce_sum(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(x.data.sum(), dtype=x.data.dtype), "sum", (x,), _backward)


def take(x: Tensor, index: Any) -> Tensor:
    """Basic (view) indexing; advanced indexing is not supported."""

    def _backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return Tensor._result(np.array(x.data[index]), "take", (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from exc

    def _backward(g: np.ndarray):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(tensors, parts))

    return Tensor._result(out, "concat", tuple(tensors), _backward)


# --- network ops ---


def _windows(xp: np.ndarray, k: int, stride: int, out_extents: Sequence[int]) -> np.ndarray:
    view = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    view = view[:, ::stride, ::stride, ::stride]
    d, h, w = out_extents
    return view[:, :d, :h, :w]


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[C_in,D,H,W] with w[C_out,C_in,k,k,k], zero padding."""
    if x.ndim != 4 or w.ndim != 5 or b.ndim != 1:
        raise ShapeError("conv3d", f"expected x 4-D, w 5-D, b 1-D; got {x.shape}, {w.shape}, {b.shape}")
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError("conv3d", f"kernel must be cubic with odd extent, got {w.shape[2:]}")
    if c_in != x.shape[0]:
        raise ShapeError("conv3d", f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if b.shape[0] != c_out:
        raise ShapeError("conv3d", f"bias has {b.shape[0]} entries, kernel has {c_out} outputs")
    if stride < 1 or pad < 0:
        raise ShapeError("conv3d", f"invalid stride={stride} pad={pad}")

    out_extents = [(e + 2 * pad - k) // stride + 1 for e in x.shape[1:]]
    if any(e < 1 for e in out_extents):
        raise ShapeError("conv3d", f"input {x.shape[1:]} too small for kernel {k} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    windows = _windows(xp, k, stride, out_extents)
    out = np.tensordot(w.data, windows, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out += b.data[:, None, None, None]

    def _backward(g: np.ndarray):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=([1, 2, 3], [1, 2, 3]))
        if x.requires_grad:
            cols = np.tensordot(w.data, g, axes=([0], [0]))
            gxp = np.zeros_like(xp)
            d, h, ww = out_extents
            for i in range(k):
                zi = slice(i, i + stride * (d - 1) + 1, stride)
                for j in range(k):
                    yj = slice(j, j + stride * (h - 1) + 1, stride)
                    for l in range(k):
                        xl = slice(l, l + stride * (ww - 1) + 1, stride)
                        gxp[:, zi, yj, xl] += cols[:, i, j, l]
            gx = gxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else gxp
        return gx, gw, gb

    return Tensor._result(out, "conv3d", (x, w, b), _backward)


def instance_norm(x: Tensor, scale: Tensor, bias: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per-channel standardisation over the spatial extent, then affine."""
    if x.ndim < 2:
        raise ShapeError("instance_norm", f"expected [C, ...], got {x.shape}")
    channels = x.shape[0]
    if scale.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError("instance_norm", f"affine shapes {scale.shape}/{bias.shape} do not match {channels} channels")
    axes = tuple(range(1, x.ndim))
    bshape = (channels,) + (1,) * (x.ndim - 1)
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * scale.data.reshape(bshape) + bias.data.reshape(bshape)

    def _backward(g: np.ndarray):
        gx = gs = gb = None
        if scale.requires_grad:
            gs = (g * xhat).sum(axis=axes)
        if bias.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            dxhat = g * scale.data.reshape(bshape)
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        return gx, gs, gb

    return Tensor._result(out, "instance_norm", (x, scale, bias), _backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    positive = x.data >= 0
    factor = np.where(positive, 1.0, slope).astype(x.data.dtype)

    def _backward(g: np.ndarray):
        return (g * factor,)

    return Tensor._result(x.data * factor, "leaky_relu", (x,), _backward)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over axis 0, stabilised by max-subtraction."""
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=0, keepdims=True)

    def _backward(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=0, keepdims=True)),)

    return Tensor._result(probs, "softmax_channel", (x,), _backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", f"expected [C,D,H,W], got {x.shape}")
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)
    c, d, h, w = x.shape

    def _backward(g: np.ndarray):
        return (g.reshape(c, d, factor, h, factor, w, factor).sum(axis=(2, 4, 6)),)

    return Tensor._result(out, "upsample_nearest", (x,), _backward)


# --- reverse pass ---


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    nodes = loss._tape.nodes
    stop = next(i for i in range(len(nodes) - 1, -1, -1) if nodes[i] is loss._node)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes[: stop + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, input_grad in zip(node.inputs, node.backward(g)):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + input_grad if key in grads else input_grad
            if tensor.is_leaf:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        g = np.asarray(grads[key], dtype=tensor.data.dtype).reshape(tensor.shape)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
