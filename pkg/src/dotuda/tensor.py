"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the kernels needed by the model and its losses are provided. Every op
records a closure that accumulates into its parents' ``grad`` buffers; call
``Tensor.backward`` on a scalar to populate them and ``zero_grad`` before the
next step.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from dotuda.errors import DegenerateVectorError, DimensionError, NonFiniteError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Propagate gradients from this tensor to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """A trainable leaf tensor with a per-parameter learning-rate multiplier."""

    __slots__ = ("lr_scale",)

    def __init__(self, data, name: str | None = None, lr_scale: float = 1.0):
        super().__init__(data, requires_grad=True, name=name)
        if not lr_scale > 0:
            raise ValueError(f"lr_scale must be positive, got {lr_scale}")
        self.lr_scale = float(lr_scale)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def check_finite(x: Tensor, op: str):
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{op} received non-finite input")


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward)


# reductions and shape ops ----------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def _is_basic_key(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in keys)


def index(x: Tensor, key) -> Tensor:
    shape = x.shape
    basic = _is_basic_key(key)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(x.data[key]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape``; the backward pass sums over the copies."""
    old = x.shape
    return _make(
        np.ascontiguousarray(np.broadcast_to(x.data, tuple(shape))),
        (x,),
        lambda g: (_unbroadcast(g, old),),
    )


# linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make(np.matmul(ad, bd), (a, b), backward)


# fused kernels -------------------------------------------------------------------

def _stable_softmax(xd: np.ndarray) -> np.ndarray:
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp_array(xd: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp along ``axis`` (keeps no dims)."""
    m = xd.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    check_finite(x, "softmax")
    out = _stable_softmax(x.data)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    check_finite(x, "log_softmax")
    xd = x.data
    out = xd - logsumexp_array(xd)[..., None]

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``."""
    dim = x.shape[-1]
    if dim == 0:
        raise DimensionError("layer_norm over a zero-length row")
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({dim},), got {gain.shape}, {bias.shape}")
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gd + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward)


def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if np.any(norm <= min_norm):
        raise DegenerateVectorError(f"cannot normalize a row with norm <= {min_norm}")
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), backward)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x K logits, got {logits.shape}")
    check_finite(logits, "cross_entropy_with_logits")
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {batch}")
    if batch == 0:
        raise DimensionError("cross_entropy over an empty batch")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise IndexError(f"labels must lie in [0, {classes}), got {labels.tolist()}")
    xd = logits.data
    lse = logsumexp_array(xd)
    rows = np.arange(batch)
    value = np.mean(lse - xd[rows, labels])

    def backward(g):
        grad = _stable_softmax(xd)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _make(np.array(value), (logits,), backward)


# optimization ----------------------------------------------------------------------

def sgd_step(
    params: Sequence[Parameter],
    velocities: list[np.ndarray | None],
    lr: float,
    momentum: float,
    weight_decay: float,
):
    """One in-place SGD-with-momentum update.

    ``v <- momentum * v + (grad + weight_decay * theta)`` then
    ``theta <- theta - lr * lr_scale * v``. ``velocities`` is updated in place.
    """
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
        if p.grad.shape != p.data.shape:
            raise DimensionError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {p.name}")
    for i, p in enumerate(params):
        step = p.grad + weight_decay * p.data
        v = velocities[i]
        v = step.copy() if v is None else momentum * v + step
        velocities[i] = v
        p.data -= (lr * p.lr_scale) * v


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        sgd_step(self.params, self.velocities, self.lr, self.momentum, self.weight_decay)


# gradient checking -----------------------------------------------------------------

def grad_check(f: Callable, x: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` is called as ``f(x)`` and must return a scalar tensor. ``x`` may be a
    single tensor or a sequence of tensors; every coordinate of every input is
    perturbed. Relative error per coordinate is ``|ad - fd| / max(1e-8, |fd| + |ad|)``.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(x)
    value = out.item()
    if not math.isfinite(value):
        raise NonFiniteError("grad_check: function is not finite at x")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        with no_grad():
            v = f(x).item()
        if not math.isfinite(v):
            raise NonFiniteError("grad_check: non-finite evaluation inside the h-neighborhood")
        return v

    worst = 0.0
    for t, ad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = evaluate()
            flat[i] = orig - h
            minus = evaluate()
            flat[i] = orig
            fd = (plus - minus) / (2.0 * h)
            err = abs(fd - ad_flat[i]) / max(1e-8, abs(fd) + abs(ad_flat[i]))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
