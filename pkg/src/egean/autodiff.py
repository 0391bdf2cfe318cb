"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside
a tape, the same functions evaluate forward only, which is what inference
and evaluation use.

    >>> w = Tensor([1.0, 2.0], trainable=True)
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> backward(loss, tape)
    >>> w.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SIGMOID_CLAMP = 30.0


class AutodiffError(RuntimeError):
    """Misuse of the differentiation engine (bad shapes, replayed tapes)."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "trainable", "requires_grad", "name", "_parents", "_backward")
    # make ndarray (op) Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, trainable: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.trainable = bool(trainable)
        self.requires_grad = self.trainable
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, trainable={self.trainable})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as they execute, so the list is already in
    topological order.  A tape is consumed by one :func:`backward` call.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False
    adjoints: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Tensor) -> None:
        if self.consumed:
            raise AutodiffError("tape already consumed by backward(); rerun the forward pass")
        self.nodes.append(node)

    def grad_of(self, t: Tensor) -> np.ndarray:
        """Adjoint of any tensor seen by the last backward pass (zeros if unreached)."""
        g = self.adjoints.get(id(t))
        return np.zeros_like(t.data) if g is None else g


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Context manager that suspends recording (forward-only evaluation)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` of every trainable tensor reachable from ``loss``.

    Tensors in ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise AutodiffError("tape already consumed by backward(); rerun the forward pass")
    tape.consumed = True
    adj = tape.adjoints
    adj.clear()
    adj[id(loss)] = np.ones_like(loss.data)
    leaves: dict = {}
    for node in reversed(tape.nodes):
        g = adj.get(id(node))
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    if loss._backward is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        if leaf.trainable:
            leaf.grad = np.array(adj[key], dtype=np.float64).reshape(leaf.shape)
    if params is not None:
        for p in params:
            if p.trainable and id(p) not in leaves:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    """Logistic function; the argument is clamped to +-30 before ``exp``."""
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)))
    return _node(out, (a,), lambda g: (g * s,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """``max(x, slope*x)``; the subgradient at exactly zero is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    a = as_tensor(a)
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def stop_gradient(a) -> Tensor:
    """Identity forward, zero adjoint backward."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].data.ndim
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _node(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices scatter-add on backward."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), fn)


def sq_distances(x, y) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``x`` and ``y``."""
    x, y = as_tensor(x), as_tensor(y)
    xd, yd = x.data, y.data
    out = (xd * xd).sum(axis=1)[:, None] + (yd * yd).sum(axis=1)[None, :] - 2.0 * (xd @ yd.T)
    out = np.maximum(out, 0.0)

    def fn(g):
        gx = 2.0 * (g.sum(axis=1)[:, None] * xd - g @ yd)
        gy = 2.0 * (g.sum(axis=0)[:, None] * yd - g.T @ xd)
        return gx, gy

    return _node(out, (x, y), fn)


# ---------------------------------------------------------------------------
# initialisation and optimisation


def xavier_init(shape, rng: np.random.Generator, name: Optional[str] = None,
                trainable: bool = True) -> Tensor:
    """Glorot-uniform weights; one-dimensional shapes (biases) start at zero."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        return Tensor(np.zeros(shape), trainable=trainable, name=name)
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), trainable=trainable, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adam_step(self.params, grads, self.state)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise AutodiffError("adam_step: params, grads and moment buffers differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise AutodiffError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.lr * state.weight_decay * p.data
        p.data -= update
