"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while gradient recording is enabled append a record to the
thread's active :class:`Tape`. :func:`backward` walks the tape in reverse,
accumulates adjoints, writes ``.grad`` on every leaf that requires it, and
clears the tape.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


_state = threading.local()


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def _recording() -> bool:
    return getattr(_state, "enabled", True)


def active_tape() -> Tape:
    return _tape()


@contextmanager
def no_grad():
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def reset_tape():
    """Drop any records left over from a forward pass that was never differentiated."""
    _tape().clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None  # index into the tape of the record producing this tensor
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*inputs: Tensor) -> bool:
    return _recording() and any(t.requires_grad for t in inputs)


def _emit(kind: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    if _tracked(*inputs):
        tape = _tape()
        out.requires_grad = True
        out.node = len(tape.records)
        tape.records.append(Record(kind, inputs, out, backward))
    else:
        out.requires_grad = False
        out.node = None
    return out


def _check_finite(kind: str, data: np.ndarray):
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{kind} produced non-finite values")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def row(v) -> Tensor:
    """View a length-d vector as a 1×d matrix."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise DimensionError("row expects a vector")
    d = v.shape[0]
    return _emit("reshape", v.data.reshape(1, d), (v,), lambda g: (g.reshape(d),))


def repeat_rows(v, n: int) -> Tensor:
    """Stack a length-d vector n times into an n×d matrix (ones[n×1] @ v[1×d])."""
    return matmul(np.ones((n, 1)), row(v))


# ---------------------------------------------------------------- elementwise


def _binary_shapes(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    A, B = a.data, b.data

    def backward(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _emit("mul", A * B, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    A, B = a.data, b.data
    out = A / B

    def backward(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)

    return _emit("div", out, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _emit("square", A * A, (a,), lambda g: (2.0 * A * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def elu(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    out = A.copy()
    neg = A < 0
    out[neg] = np.expm1(A[neg])
    return _emit("elu", out, (a,), lambda g: (g * (np.minimum(out, 0.0) + 1.0),))


def identity(a) -> Tensor:
    return as_tensor(a)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    out = np.maximum(A, 0.0) + np.log1p(np.exp(-np.abs(A)))
    return _emit("softplus", out, (a,), lambda g: (g * sigmoid_np(A),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    if np.any(A <= 0):
        raise DomainError("log of a non-positive value")
    return _emit("log", np.log(A), (a,), lambda g: (g / A,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    _check_finite("exp", out)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > floor
    return _emit("clamp_min", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


ACTIVATIONS = {"relu": relu, "elu": elu, "linear": identity, "softplus": softplus}

ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "relu": relu, "elu": elu,
    "softplus": softplus, "log": log, "exp": exp, "square": square,
}


def elementwise(kind: str, *inputs) -> Tensor:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------- reductions


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} invalid for {ndim}-d tensor")
        norm.append(ax % ndim)
    return tuple(sorted(set(norm)))


def reduce(kind: str, x, axis=None) -> Tensor:
    x = as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = _normalize_axis(axis, x.data.ndim)
    shape = x.shape
    count = x.size if axes is None else int(np.prod([shape[a] for a in axes]))
    out = x.data.sum(axis=axes)
    if kind == "mean":
        out = out / count
    scale = 1.0 if kind == "sum" else 1.0 / count

    def backward(g):
        g = np.asarray(g) * scale
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(kind, np.asarray(out, dtype=np.float64), (x,), backward)


def logsumexp_mean(x) -> Tensor:
    """log(mean(exp(x))) over all entries, max-shifted."""
    x = as_tensor(x)
    X = x.data
    if X.size == 0:
        raise ContractError("logsumexp over an empty tensor")
    m = X.max()
    w = np.exp(X - m)
    s = w.sum()
    out = m + np.log(s / X.size)
    return _emit("logmeanexp", np.asarray(out), (x,), lambda g: (g * w / s,))


# ---------------------------------------------------------------- losses


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_logits(logits, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy expects logits [n×K] and labels [n]")
    n, k = logits.shape
    if n == 0:
        raise ContractError("empty batch")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must be integers in [0, {k})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- backward


class GradStore(dict):
    """Maps each differentiated leaf (by identity) to its gradient array."""

    def __getitem__(self, tensor):
        return dict.__getitem__(self, id(tensor))

    def get(self, tensor, default=None):
        return dict.get(self, id(tensor), default)

    def __contains__(self, tensor):
        return dict.__contains__(self, id(tensor))


def backward(loss: Tensor) -> GradStore:
    if loss.data.ndim != 0 and loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    store = GradStore()
    if loss.node is None:
        tape.clear()
        return store
    if loss.node >= len(tape.records) or tape.records[loss.node].output is not loss:
        raise ContractError("loss is not on the active tape")

    adj = {loss.node: np.ones_like(loss.data)}
    leaves: dict[int, tuple] = {}
    for idx in range(loss.node, -1, -1):
        g = adj.pop(idx, None)
        if g is None:
            continue
        rec = tape.records[idx]
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if not inp.requires_grad:
                continue
            if inp.node is not None:
                if inp.node >= idx or tape.records[inp.node].output is not inp:
                    continue  # stale handle from an earlier, consumed tape
                prev = adj.get(inp.node)
                adj[inp.node] = gi if prev is None else prev + gi
            else:
                key = id(inp)
                if key in leaves:
                    leaves[key] = (inp, leaves[key][1] + gi)
                else:
                    leaves[key] = (inp, gi)
    tape.clear()
    for key, (leaf, g) in leaves.items():
        g = np.array(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        dict.__setitem__(store, key, g)
    return store


# ---------------------------------------------------------------- gradient check


def numeric_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-4):
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(point)).item()
            flat[i] = orig - step
            fm = f(Tensor(point)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-4) -> float:
    """Max relative error between the tape gradient of scalar ``f`` and central differences."""
    x = Tensor(point, requires_grad=True)
    reset_tape()
    grads = backward(f(x))
    analytic = grads.get(x, np.zeros_like(x.data))
    return relative_error(analytic, numeric_grad(f, x.data, step))


def params_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4):
    """Check d(loss)/d(param) for every parameter tensor of a closure-built loss."""
    reset_tape()
    for p in params:
        p.grad = None
    grads = backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data))
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = loss_fn().item()
                flat[i] = orig - step
                fm = loss_fn().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
