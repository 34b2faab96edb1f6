"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records a node on its output tensor carrying
the operands, a backward closure and a monotonically increasing sequence
number.  ``GradTape.from_loss`` collects the nodes reachable from a loss and
orders them by descending sequence number, which is exactly reverse execution
order, so ``backward`` is a single linear sweep.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import DimensionError, EvaluationError, NumericalError

_state = threading.local()
_seq = itertools.count()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, EMA updates)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError(f"tensor must have positive dimensions, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out._seq = -1
        out._parents = ()
        out._backward = None
        track = _recording() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        if track:
            out._parents = tuple(parents)
            out._backward = backward
            out._seq = next(_seq)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class GradTape:
    """Ordered record of differentiable operations leading to a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GradTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def reverse(self) -> Iterable[Tensor]:
        return reversed(self.nodes)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> GradTape:
    """Propagate d(loss)/d(.) into ``grad`` of every requires_grad ancestor."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape.from_loss(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in tape.reverse():
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return tape


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


# -- helpers -------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return Tensor._result(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("log of non-positive value")
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return Tensor._result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))  # keeps NaN visible


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (x,), _bw)


# -- shape / reductions -----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (x,), _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    return Tensor._result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    return Tensor._result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, _bw)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (x,), _bw)


# -- linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch dimensions on either side."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), _bw)


def spd_solve(A: Tensor, B: Tensor) -> Tensor:
    """Solve A X = B for symmetric positive-definite A via Cholesky."""
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise DimensionError(f"spd_solve: shapes {A.shape} and {B.shape} are incompatible")
    try:
        factor = scipy.linalg.cho_factor(A.data, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"matrix is not positive definite ({exc})") from None
    X = scipy.linalg.cho_solve(factor, B.data)

    def _bw(g):
        gB = scipy.linalg.cho_solve(factor, g)
        gA = -gB @ X.T
        return gA, gB

    return Tensor._result(X, (A, B), _bw)


# -- normalisation / probability -----------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), _bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def _bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if not gain.requires_grad and not bias.requires_grad:
            return dx, None, None
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._result(out, (x, gain, bias), _bw)


def l2_normalize(x: Tensor, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < min_norm):
        raise NumericalError("cannot normalise a zero vector")
    out = x.data / norm

    def _bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._result(out, (x,), _bw)


# -- verification ---------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               per_tensor: bool = False):
    """Compare tape gradients with central finite differences.

    Returns the max relative error ``|a - n| / max(|a|, |n|, 1e-8)`` over all
    checked coordinates, or a list of per-tensor maxima if ``per_tensor``.
    ``max_coords`` limits the number of coordinates probed per tensor (chosen
    by ``rng``); by default every coordinate is probed.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside the supported range")
    zero_grads(params)
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError("loss is not finite at the evaluation point")
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)

    def _eval() -> float:
        with no_grad():
            v = float(f().data)
        if not np.isfinite(v):
            raise EvaluationError("loss became non-finite during finite differencing")
        return v

    errs = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fp = _eval()
            flat[j] = orig - h
            fm = _eval()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = ga.reshape(-1)[j]
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
        errs.append(worst)
    return errs if per_tensor else max(errs, default=0.0)
