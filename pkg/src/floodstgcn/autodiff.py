"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. Nothing is cached between forward passes; a new tape is
built each time operations run with gradient recording enabled.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Mapping, Sequence

import numpy as np

from .exceptions import DimensionError, FloodSTGCNError, WindowTooShortError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "linear",
    "causal_conv1d",
    "graph_propagate",
    "glu",
    "split_glu",
    "sigmoid",
    "relu",
    "layer_norm",
    "concat",
    "reshape",
    "tsum",
    "mean",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on a tape."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Immutable float64 array that may sit on a differentiation tape.

    ``data`` is a read-only, C-contiguous (row-major) ``np.ndarray``.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(data, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _not_scalar(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def matmul(a, b) -> Tensor:
    """Plain 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), back, "matmul")


def linear(x, weight) -> Tensor:
    """Contract the last axis of ``x`` (..., C) with ``weight`` (C, O)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    c_in, c_out = weight.shape
    x2 = x.data.reshape(-1, c_in)
    out = (x2 @ weight.data).reshape(x.shape[:-1] + (c_out,))

    def back(g):
        g2 = g.reshape(-1, c_out)
        return (g2 @ weight.data.T).reshape(x.shape), x2.T @ g2

    return Tensor._result(out, (x, weight), back, "linear")


def causal_conv1d(x, kernel, bias=None) -> Tensor:
    """Valid (unpadded) 1-D convolution along the time axis.

    ``x`` is (..., N, M, C_in) and ``kernel`` is (Kt, C_in, C_out), with an
    optional (C_out,) bias. Output time index t reads inputs t .. t+Kt-1, so
    the time extent shrinks to N - Kt + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    parents = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    if x.ndim < 3 or kernel.ndim != 3:
        raise DimensionError(f"causal_conv1d: expected (..., N, M, C) and (Kt, C, O), got {x.shape} and {kernel.shape}")
    kt, c_in, c_out = kernel.shape
    n, m, c = x.shape[-3:]
    if c != c_in:
        raise DimensionError(f"causal_conv1d: input channels {x.shape} do not match kernel {kernel.shape}")
    if kt < 1 or n < kt:
        raise WindowTooShortError(f"causal_conv1d: window of {n} steps is shorter than kernel width {kt}")
    n_out = n - kt + 1
    lead = x.shape[:-3]
    cols = np.concatenate([x.data[..., k:k + n_out, :, :] for k in range(kt)], axis=-1)
    cols2 = cols.reshape(-1, kt * c_in)
    kmat = kernel.data.reshape(kt * c_in, c_out)
    out = cols2 @ kmat
    if bias is not None:
        if parents[2].shape != (c_out,):
            raise DimensionError(f"causal_conv1d: bias shape {parents[2].shape} does not match {c_out} channels")
        out += parents[2].data
    out = out.reshape(lead + (n_out, m, c_out))

    def back(g):
        g2 = g.reshape(-1, c_out)
        dkernel = (cols2.T @ g2).reshape(kt, c_in, c_out)
        dcols = (g2 @ kmat.T).reshape(lead + (n_out, m, kt * c_in))
        if kt == 1:
            dx = dcols
        else:
            dx = np.zeros(x.shape)
            for k in range(kt):
                dx[..., k:k + n_out, :, :] += dcols[..., k * c_in:(k + 1) * c_in]
        return (dx, dkernel) if bias is None else (dx, dkernel, g2.sum(axis=0))

    return Tensor._result(out, parents, back, "causal_conv1d")


def graph_propagate(operator: np.ndarray, x) -> Tensor:
    """Left-multiply the segment axis of ``x`` (..., M, C) by a constant (M, M) matrix."""
    x = as_tensor(x)
    op = np.asarray(operator, dtype=np.float64)
    m = op.shape[0]
    if op.ndim != 2 or op.shape[1] != m or x.ndim < 2 or x.shape[-2] != m:
        raise DimensionError(f"graph_propagate: operator {op.shape} incompatible with signal {x.shape}")

    def apply(mat, arr):
        moved = np.moveaxis(arr, -2, 0)
        flat = moved.reshape(m, -1)
        return np.moveaxis((mat @ flat).reshape(moved.shape), 0, -2)

    def back(g):
        return (apply(op.T, g),)

    return Tensor._result(apply(op, x.data), (x,), back, "graph_propagate")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def back(g):
        return (g * s * (1.0 - s),)

    return Tensor._result(s, (x,), back, "sigmoid")


def glu(p, q) -> Tensor:
    """Gated linear unit: ``p * sigmoid(q)``."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"glu: value shape {p.shape} differs from gate shape {q.shape}")
    s = _sigmoid(q.data)

    def back(g):
        return g * s, g * p.data * s * (1.0 - s)

    return Tensor._result(p.data * s, (p, q), back, "glu")


def split_glu(z, residual=None) -> Tensor:
    """GLU over the two channel halves of ``z``: ``(P + residual) * sigmoid(Q)``.

    Equivalent to slicing ``z`` into P and Q and calling :func:`glu`, fused
    to avoid materialising the halves on the tape.
    """
    z = as_tensor(z)
    if z.shape[-1] % 2:
        raise DimensionError(f"split_glu: channel count {z.shape[-1]} is odd")
    c = z.shape[-1] // 2
    p = z.data[..., :c]
    parents = (z,)
    if residual is not None:
        residual = as_tensor(residual)
        if residual.shape != p.shape:
            raise DimensionError(f"split_glu: residual shape {residual.shape} differs from {p.shape}")
        p = p + residual.data
        parents = (z, residual)
    s = _sigmoid(z.data[..., c:])

    def back(g):
        gs = g * s
        dz = np.concatenate([gs, gs * p * (1.0 - s)], axis=-1)
        return (dz,) if residual is None else (dz, gs)

    return Tensor._result(p * s, parents, back, "split_glu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, x.data, 0.0), (x,), back, "relu")


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the channel (last) axis, then apply an affine gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if c < 1 or gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def back(g):
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._result(out, (x, gain, bias), back, "layer_norm")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def back(g):
        dx = np.zeros(x.shape)
        if _has_advanced(index):
            np.add.at(dx, index, g)
        else:
            dx[index] = g
        return (dx,)

    return Tensor._result(out, (x,), back, "getitem")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._result(out, tuple(tensors), back, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def back(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), back, "reshape")


def tsum(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(x.data.sum()), (x,), back, "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def back(g):
        return (np.full(x.shape, np.reshape(g, ()) / n),)

    return Tensor._result(np.asarray(x.data.mean()), (x,), back, "mean")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt):
    """Gradients of a scalar ``loss`` with respect to ``wrt``.

    ``wrt`` may be a sequence of tensors (a list of arrays is returned) or
    a mapping of names to tensors (a dict is returned). Tensors the loss
    does not depend on receive zero gradients.
    """
    if loss.size != 1:
        raise FloodSTGCNError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = np.asarray(pg, dtype=np.float64)

    def lookup(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        return np.zeros(t.shape) if g is None else np.asarray(g).reshape(t.shape)

    if isinstance(wrt, Mapping):
        return {name: lookup(t) for name, t in wrt.items()}
    return [lookup(t) for t in wrt]
