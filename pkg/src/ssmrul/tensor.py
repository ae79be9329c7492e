"""Dense double-precision tensors with reverse-mode differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to input gradients. ``backward`` orders the recorded graph
topologically and replays it in reverse.

Complex gradients follow the conjugate convention: for a real loss ``f`` and a
complex tensor ``z = x + iy`` the stored gradient is ``df/dx + i df/dy``. With
this choice holomorphic ops propagate ``grad_in = grad_out * conj(f'(z))`` and a
real tensor that meets a complex one simply keeps the real part.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import fft as _fft

_ids = itertools.count()
_grad_enabled = True
_mac_counters: list["MacCounter"] = []

DIV_FLOOR = 1e-300


class ShapeError(ValueError):
    pass


class DivisionFault(ArithmeticError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.array(data)
    if np.iscomplexobj(arr):
        return arr.astype(np.complex128)
    return arr.astype(np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_array(data)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -----------------------------------------------------
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
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.is_complex:
            raise TypeError("complex tensor has no real scalar value; take .real() first")
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    __float__ = item

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    # -- operators ---------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a1: int, a2: int):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def softplus(self):
        return softplus(self)

    def real(self):
        return real(self)

    def imag(self):
        return imag(self)

    def conj(self):
        return conj(self)


TensorLike = Tensor | np.ndarray | float | int | complex


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


# ---------------------------------------------------------------------------
# graph recording


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.complex128 if np.iscomplexobj(data) else np.float64)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...], complex_target: bool) -> np.ndarray:
    if g.ndim > len(shape):
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if not complex_target and np.iscomplexobj(g):
        g = g.real
    return g.reshape(shape)


def _conj(x: np.ndarray) -> np.ndarray:
    return np.conj(x) if np.iscomplexobj(x) else x


def _bshape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _require_real(t: Tensor, op: str) -> None:
    if t.is_complex:
        raise TypeError(f"{op} is defined for real tensors only")


# ---------------------------------------------------------------------------
# elementwise


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape, a.is_complex), _unbroadcast(g, b.shape, b.is_complex)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape, a.is_complex), _unbroadcast(-g, b.shape, b.is_complex)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def bw(g):
        ga = _unbroadcast(g * _conj(b.data), a.shape, a.is_complex) if a.requires_grad else None
        gb = _unbroadcast(g * _conj(a.data), b.shape, b.is_complex) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)
    if b.size and np.min(np.abs(b.data)) < DIV_FLOOR:
        raise DivisionFault(f"divisor magnitude below {DIV_FLOOR:g} in tensor of shape {b.shape}")
    out = a.data / b.data

    def bw(g):
        inv = _conj(1.0 / b.data)
        ga = _unbroadcast(g * inv, a.shape, a.is_complex) if a.requires_grad else None
        gb = _unbroadcast(-g * _conj(out) * inv, b.shape, b.is_complex) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: TensorLike, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p

    def bw(g):
        return (g * _conj(p * a.data ** (p - 1)),)

    return _result(out, (a,), bw, "pow")


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * _conj(out),), "exp")


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if not a.is_complex and np.any(a.data <= 0):
        raise ValueError("log of non-positive real entries")
    return _result(np.log(a.data), (a,), lambda g: (g / _conj(a.data),), "log")


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    _require_real(a, "sqrt")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    _require_real(a, "relu")
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: TensorLike) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    _require_real(a, "gelu")
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), bw, "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split evaluation keeps exp() from overflowing on either tail
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    _require_real(a, "sigmoid")
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    _require_real(a, "tanh")
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    _require_real(a, "softplus")
    out = np.logaddexp(0.0, a.data)
    return _result(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def real(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if not a.is_complex:
        return a
    return _result(np.ascontiguousarray(a.data.real), (a,), lambda g: (g.astype(np.complex128),), "real")


def imag(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if not a.is_complex:
        raise TypeError("imag() of a real tensor")
    return _result(np.ascontiguousarray(a.data.imag), (a,), lambda g: (1j * g,), "imag")


def conj(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if not a.is_complex:
        return a
    return _result(np.conj(a.data), (a,), lambda g: (np.conj(g),), "conj")


def complex_(re: TensorLike, im: TensorLike) -> Tensor:
    """Assemble a complex tensor from real and imaginary parts."""
    re, im = as_tensor(re), as_tensor(im)
    _require_real(re, "complex_")
    _require_real(im, "complex_")
    _bshape(re, im)

    def bw(g):
        g = np.asarray(g, dtype=np.complex128)
        return _unbroadcast(g.real, re.shape, False), _unbroadcast(g.imag, im.shape, False)

    return _result(re.data + 1j * im.data, (re, im), bw, "complex")


def where(cond: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape, a.is_complex),
            _unbroadcast(np.where(cond, 0.0, g), b.shape, b.is_complex),
        )

    return _result(np.where(cond, a.data, b.data), (a, b), bw, "where")


_UNARY = {
    "neg": neg,
    "exp": exp,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: TensorLike, b: TensorLike | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# shape ops and reductions


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: TensorLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _result(out.copy(), (a,), lambda g: (_unbroadcast(g, a.shape, a.is_complex),), "broadcast")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: TensorLike, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros(a.shape, dtype=np.result_type(g, a.data))
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(np.array(out), (a,), bw, "getitem")


def concat(tensors: Iterable[TensorLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.is_complex or not np.iscomplexobj(p) else p.real for p, t in zip(parts, ts))

    return _result(out, ts, bw, "concat")


def stack(tensors: Iterable[TensorLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack of no tensors")
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], ax)


# ---------------------------------------------------------------------------
# linear algebra and convolution


@dataclass
class MacCounter:
    """Tally of multiply-accumulates executed by matmul while active."""

    total: int = 0
    by_shape: list[tuple[tuple[int, ...], tuple[int, ...], int]] = field(default_factory=list)

    def add(self, sa, sb, macs: int) -> None:
        self.total += macs
        self.by_shape.append((sa, sb, macs))


@contextmanager
def count_mult_adds():
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    out = a.data @ b.data
    if _mac_counters:
        m, k = a.shape[-2:]
        n = b.shape[-1]
        macs = int(np.prod(batch, dtype=np.int64)) * m * k * n
        for c in _mac_counters:
            c.add(a.shape, b.shape, macs)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(_conj(b.data), -1, -2), a.shape, a.is_complex)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(_conj(a.data), -1, -2) @ g, b.shape, b.is_complex)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def fft_causal_conv(u: TensorLike, k: TensorLike) -> Tensor:
    """Causal convolution along the last axis, leading axes broadcast.

    The backward pass uses the adjoint operation (a causal correlation, i.e.
    convolution of the time-reversed gradient) rather than differentiating
    through the transform.
    """
    u, k = as_tensor(u), as_tensor(k)
    if u.shape[-1] != k.shape[-1]:
        raise ShapeError(f"signal length {u.shape[-1]} != kernel length {k.shape[-1]} ({u.shape} vs {k.shape})")
    _bshape(u, k)
    out = _fft.causal_conv(u.data, k.data)

    def bw(g):
        rg = g[..., ::-1]
        gu = gk = None
        if u.requires_grad:
            gu = _unbroadcast(_fft.causal_conv(rg, _conj(k.data))[..., ::-1], u.shape, u.is_complex)
        if k.requires_grad:
            gk = _unbroadcast(_fft.causal_conv(rg, _conj(u.data))[..., ::-1], k.shape, k.is_complex)
        return gu, gk

    return _result(out, (u, k), bw, "fft_causal_conv")


# ---------------------------------------------------------------------------
# reverse pass


class GraphCycleError(RuntimeError):
    pass


class ComputeGraph:
    """Topologically ordered view of everything a scalar root depends on."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)
        self.gradients: dict[int, np.ndarray] = {}

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if state.get(id(node)) == 2:
                    continue
                state[id(node)] = 1
            if i < len(node._parents):
                stack.append((node, i + 1))
                child = node._parents[i]
                if not child.requires_grad:
                    continue
                s = state.get(id(child))
                if s == 1:
                    raise GraphCycleError("cycle in compute graph (internal invariant violated)")
                if s is None:
                    stack.append((child, 0))
            else:
                state[id(node)] = 2
                order.append(node)
        return order

    def run(self) -> dict[int, np.ndarray]:
        root = self.root
        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                self.gradients[node.node_id] = node.grad
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        return self.gradients


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root.is_complex:
        raise TypeError("backward root must be real")
    if not root.requires_grad:
        return {}
    return ComputeGraph(root).run()


def finite_difference_check(
    f: Callable[[Tensor], Tensor], params: TensorLike, eps: float = 1e-5
) -> float:
    """Worst relative error between the analytic gradient and central differences."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(as_tensor(params).data, dtype=np.float64)
    p = Tensor(base, requires_grad=True)
    backward(f(p))
    analytic = np.zeros_like(base) if p.grad is None else p.grad
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        num = (f(Tensor(hi.reshape(base.shape))).item() - f(Tensor(lo.reshape(base.shape))).item()) / (2 * eps)
        ana = analytic.reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
