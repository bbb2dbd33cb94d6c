"""Dense tensors with reverse-mode gradient accumulation.

Every operation records its parents and a backward closure on the output
tensor while grad recording is enabled. ``backward`` walks that graph once in
reverse topological order and then drops it, so each forward pass owns its
own tape.

Parameters only take part in differentiation while ``trainable`` is set,
or inside ``track_all_grads()``; frozen weights are otherwise plain
constants, which keeps training cheap.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


_state = threading.local()
_backward_calls = 0


def backward_calls() -> int:
    """Number of completed backward() calls in this process."""
    return _backward_calls


def _flag(name: str, default: bool) -> bool:
    return getattr(_state, name, default)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    prev = _flag("recording", True)
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextlib.contextmanager
def track_all_grads():
    """Treat every Parameter as differentiable regardless of its flag."""
    prev = _flag("track_all", False)
    _state.track_all = True
    try:
        yield
    finally:
        _state.track_all = prev


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "_requires")

    def __init__(self, data, dtype=None, _parents: tuple = (), _backward=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._requires = requires_grad

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self._requires

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return total(self)


class Parameter(Tensor):
    """A named leaf tensor that optimizers may update."""

    __slots__ = ("trainable", "path")

    def __init__(self, data, path: str, trainable: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype or DEFAULT_DTYPE))
        self.path = path
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def requires_grad(self) -> bool:
        return self.trainable or _flag("track_all", False)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.path!r}, shape={self.shape}, {flag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if live and _flag("recording", True):
        return Tensor(data, _parents=tuple(parents), _backward=backward, requires_grad=True)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product (either operand may be a python scalar)."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), backward)


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, parts, backward)


def index(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    rows, dtype = table.shape[0], table.dtype

    def backward(g):
        full = np.zeros((rows,) + g.shape[ids.ndim:], dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), backward)


# -- reductions and normalizers ---------------------------------------------

def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    shape = x.shape
    return _make(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def logsumexp_rows(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]

    def backward(g):
        return (g[..., None] * e / s,)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Standardize the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, ggamma, gbeta

    if d < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    return _make(out, (x, gamma, beta), backward)


# -- differentiation --------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(loss)/d(param) into every reachable differentiable Parameter.

    The recorded graph is released afterwards.
    """
    global _backward_calls
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    _backward_calls += 1
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads = {id(loss): np.asarray(seed, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        node._parents = ()
        node._backward = None


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5,
                           coords: Iterable[int] | None = None) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``coords`` restricts the probe to selected flat indices; other entries
    stay zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error, with an absolute floor for near-zero gradients."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


# -- text snapshots -----------------------------------------------------------

def format_snapshot(arr: np.ndarray) -> str:
    """``shape: d1 d2 ...`` header line followed by row-major values."""
    arr = np.asarray(arr)
    header = "shape: " + " ".join(str(s) for s in arr.shape)
    values = " ".join(repr(float(v)) for v in arr.reshape(-1))
    return header + "\n" + values + "\n"


def parse_snapshot(text: str, dtype=DEFAULT_DTYPE) -> np.ndarray:
    lines = text.strip("\n").split("\n", 1)
    head = lines[0]
    if not head.startswith("shape:"):
        raise ValueError(f"snapshot header must start with 'shape:', got {head!r}")
    shape = tuple(int(s) for s in head[len("shape:"):].split())
    body = lines[1] if len(lines) > 1 else ""
    values = np.array([float(v) for v in body.split()], dtype=dtype)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"snapshot has {values.size} values for shape {shape}")
    return values.reshape(shape)
