"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient, the output remembers its parents together with a
closure mapping the output adjoint to the input adjoints.  Nodes get a
monotonically increasing id at construction time, so sorting reachable
nodes by id reproduces construction order and :func:`backward` simply
walks that order in reverse.

Shapes are never broadcast implicitly.  Binary elementwise ops require
identical shapes (Python scalars are accepted as constants); use
:func:`broadcast` when a bias or statistic must be expanded.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_node_ids = itertools.count()

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording graph nodes (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)
        self.op = "leaf"

    # -- array-like conveniences -------------------------------------------
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
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const_like(value, like: Tensor) -> Tensor:
    return Tensor(np.full(like.shape, float(value)))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out._id = next(_node_ids)
    out.op = op
    if getattr(_state, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape, detail="no implicit broadcasting; use broadcast()")


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add")
    b = as_tensor(b)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _make(a.data - c, (a,), lambda g: (g,), "sub")
    b = as_tensor(b)
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    b = as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _make(a.data / c, (a,), lambda g: (g / c,), "div")
    b = as_tensor(b)
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (..., k, n); leading batch extents must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def _bw(g):
        return (g @ np.swapaxes(bd, -1, -2) if need_a else None,
                np.swapaxes(ad, -1, -2) @ g if need_b else None)

    return _make(ad @ bd, (a, b), _bw, "matmul")


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError(f"log: non-positive input (min {ad.min():.3g})")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def elu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    pos = ad > 0
    em = np.exp(np.minimum(ad, 0.0))
    out = np.where(pos, ad, em - 1.0)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, em),), "elu")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad < 0):
        raise DomainError(f"sqrt: negative input (min {ad.min():.3g})")
    out = np.sqrt(ad)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    return _make(
        np.asarray(a.data.mean(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / n,),
        "mean",
    )


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, detail="axes must permute dimensions")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", (), detail="empty input list")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, splits, axis=ax)),
        "concat",
    )


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) numpy indexing; integer indices drop an axis."""
    a = as_tensor(a)
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _make(np.array(a.data[index]), (a,), _bw, "slice")


def broadcast(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", src, shape) from None
    lead = len(shape) - len(src)
    expanded = tuple(i for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def _bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return _make(out, (a,), _bw, "broadcast")


# ---------------------------------------------------------------------------
# fused kernels
# ---------------------------------------------------------------------------

def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), _bw, "softmax_lastdim")


def layernorm_lastdim(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    xc = a.data - a.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def _bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), _bw, "layernorm_lastdim")


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "softmax_lastdim": softmax_lastdim,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "sum": sum_,
    "mean": mean,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "broadcast": broadcast,
    "square": square,
    "sqrt": sqrt,
    "layernorm_lastdim": layernorm_lastdim,
    # helpers beyond the core kinds
    "neg": neg,
    "elu": elu,
    "clip": clip,
    "reshape": reshape,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply the operation named ``kind``; see :data:`OPS` for the catalogue."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


@dataclass
class Graph:
    """Recorded operations reachable from a tensor, in construction order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        return cls([Node(t.op, tuple(p._id for p in t._parents), t._id) for t in _collect(out)])


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or t._backward is None:
            continue
        seen.add(t._id)
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf
    that requires a gradient.  Existing leaf gradients are added to, which is
    what gradient accumulation over micro-batches relies on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    for node in reversed(_collect(loss)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = np.array(pg, dtype=DTYPE) if parent.grad is None else parent.grad + pg
            elif parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between the reverse-mode gradient of scalar ``f``
    at ``x`` and a central-difference estimate."""
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x0.copy())).item()
        flat[i] = orig - step
        fm = f(Tensor(x0.copy())).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return float(relative_errors(analytic, numeric).max()) if x0.size else 0.0


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against each named parameter.

    ``loss_fn`` must read the parameters' ``.data`` afresh on each call and be
    deterministic.  At most ``max_coords`` coordinates per parameter are
    probed (chosen by ``rng``).  Returns the max relative error per name.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    report = {}
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros(p.shape)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        analytic = grad.reshape(-1)[idx]
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * step)
        report[name] = float(relative_errors(analytic, numeric).max()) if len(idx) else 0.0
    for p in params.values():
        p.zero_grad()
    return report
