"""Small reverse-mode autodiff over float32 numpy arrays.

Only the handful of ops needed to train dense classifiers are provided.
Every op validates shapes up front and refuses to emit non-finite values.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "DimensionError",
    "ContractError",
    "DomainError",
    "tensor",
    "matmul",
    "routed_matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "elementwise",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "mse",
    "loss",
    "backward",
    "no_grad",
    "precision",
    "stats",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was used outside its documented contract."""


class DomainError(ValueError):
    """A value lies outside the domain an operation accepts."""


_state = threading.local()

# Instrumentation: lets callers assert that a code path did no gradient work.
stats = {"backward_calls": 0, "grad_fn_calls": 0}


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the float type new tensors are created with.

    Only used by gradient checks, where float64 keeps finite differences
    from drowning in rounding noise.
    """
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=_dtype())
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None):
        return _sum(self, axis)

    def mean(self, axis=None):
        return _mean(self, axis)


class Parameter(Tensor):
    """Trainable tensor. Frozen parameters still accumulate gradients but
    optimizers leave their values alone."""

    __slots__ = ("frozen", "name")

    def __init__(self, data, frozen: bool = False, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.frozen = frozen
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents, backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("operation produced NaN or Inf")
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g.astype(t.grad.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2:
        raise DimensionError(f"matmul expects [m,k] x [k,p], got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                _accum(b, np.outer(a.data, g))
            else:
                _accum(b, a.data.T @ g)

    return _make(out, (a, b), backward)


def routed_matmul(x, omega, stack) -> Tensor:
    """``sum_i omega[:, i] * (x @ stack[i])`` as one fused product.

    x: [N, d], omega: [N, n], stack: [n, d, k] -> [N, k].
    """
    x, omega, stack = _as_tensor(x), _as_tensor(omega), _as_tensor(stack)
    if x.data.ndim != 2 or omega.data.ndim != 2 or stack.data.ndim != 3:
        raise DimensionError(f"routed_matmul expects [N,d], [N,n], [n,d,k]; got "
                             f"{x.shape}, {omega.shape}, {stack.shape}")
    (N, d), (n, d2, k) = x.shape, stack.shape
    if d != d2 or omega.shape != (N, n):
        raise DimensionError(f"routed_matmul shapes disagree: {x.shape}, {omega.shape}, {stack.shape}")
    mixed = (omega.data[:, :, None] * x.data[:, None, :]).reshape(N, n * d)
    flat = stack.data.reshape(n * d, k)
    out = mixed @ flat

    def backward(g):
        if stack.requires_grad:
            _accum(stack, (mixed.T @ g).reshape(n, d, k))
        if x.requires_grad or omega.requires_grad:
            back = (g @ flat.T).reshape(N, n, d)
            if omega.requires_grad:
                _accum(omega, np.matmul(back, x.data[:, :, None])[:, :, 0])
            if x.requires_grad:
                _accum(x, np.matmul(omega.data[:, None, :], back)[:, 0, :])

    return _make(out, (x, omega, stack), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * _dtype()(c), (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward)


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, scale, relu."""
    if op == "add":
        return add(*args)
    if op == "sub":
        return sub(*args)
    if op == "scale":
        return scale(*args)
    if op == "relu":
        return relu(*args)
    raise ValueError(f"unknown elementwise op {op!r}")


def _sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape))

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def _mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(_sum(a, axis), 1.0 / count)


def _getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(np.array(out), (a,), backward)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    logits = _as_tensor(logits)
    if logits.data.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    p = _softmax_np(logits.data)

    def backward(g):
        _accum(logits, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (logits,), backward)


def log_softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    if logits.data.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError("log_softmax of an empty vector")
    out = _log_softmax_np(logits.data)

    def backward(g):
        p = np.exp(out)
        _accum(logits, g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (logits,), backward)


def cross_entropy(logits, target) -> Tensor:
    """Mean cross-entropy of ``logits`` ([C] or [N, C]) against class indices
    or one-hot / probability rows."""
    logits = _as_tensor(logits)
    x = logits.data
    if x.ndim not in (1, 2):
        raise DimensionError(f"cross_entropy expects [C] or [N,C] logits, got {x.shape}")
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    n, c = x2.shape
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if np.issubdtype(t.dtype, np.integer):
        idx = np.atleast_1d(t).astype(np.int64)
        if idx.shape != (n,):
            raise DimensionError(f"target shape {t.shape} does not match logits {x.shape}")
        if np.any(idx < 0) or np.any(idx >= c):
            raise DomainError(f"target index out of range [0, {c})")
        onehot = np.zeros((n, c), dtype=x.dtype)
        onehot[np.arange(n), idx] = 1
    else:
        onehot = np.asarray(t, dtype=x.dtype).reshape(n, -1)
        if onehot.shape != (n, c):
            raise DimensionError(f"target shape {t.shape} does not match logits {x.shape}")
    logp = _log_softmax_np(x2)
    out = np.asarray(-(onehot * logp).sum() / n, dtype=x.dtype)

    def backward(g):
        grad = (np.exp(logp) * onehot.sum(axis=1, keepdims=True) - onehot) * (g / n)
        _accum(logits, grad[0] if single else grad)

    return _make(out, (logits,), backward)


def mse(prediction, target) -> Tensor:
    prediction, target = _as_tensor(prediction), _as_tensor(target)
    if prediction.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {prediction.shape} vs {target.shape}")
    d = sub(prediction, target)
    return _mean(mul(d, d))


def loss(kind: str, prediction, target) -> Tensor:
    if kind in ("cross-entropy", "cross_entropy", "ce"):
        return cross_entropy(prediction, target)
    if kind == "mse":
        return mse(prediction, target)
    raise ValueError(f"unknown loss kind {kind!r}")


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every tracked tensor's ``grad``."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward on a tensor that is not on the tape")
    stats["backward_calls"] += 1

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # interior nodes start from zero on every call; leaves keep accumulating
    for node in order:
        if node._backward is not None:
            node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            stats["grad_fn_calls"] += 1
            node._backward(node.grad)
