"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive that touches a tensor with ``requires_grad`` records a node
holding its inputs and a gradient rule; ``backward`` replays the recorded
nodes in reverse topological order and accumulates gradients into the leaf
tensors. All values are float64 and every primitive checks its output for
NaN/Inf, so numerical blowups surface at the op that produced them.

Broadcasting is deliberately restricted: elementwise ops accept equal shapes
or a leading-dimension batch broadcast (e.g. ``[N, D] + [D]``). Anything else
is a shape error, which keeps the gradient rules short and auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "no_grad",
    "grad_enabled",
    "backward",
    "zero_grads",
    "sgd_step",
    "forward_primitive",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "relu",
    "softmax",
    "square",
    "sum",
    "mean",
    "reshape",
    "broadcast",
    "clamp",
    "batchnorm",
    "conv2d",
    "scale",
    "shift",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand or result values lie outside the operation's numeric domain."""


_GRAD_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class no_grad:
    """Context manager that disables graph recording (e.g. for evaluation)."""

    def __enter__(self) -> "no_grad":
        self._prev = grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        _GRAD_STATE.enabled = self._prev
        return False


class _Node:
    """A recorded primitive: its inputs and the rule mapping the output
    gradient to one gradient per input (``None`` for inputs that need none).
    Nodes only ever reference tensors created earlier, so any recorded graph
    is topologically ordered by construction."""

    __slots__ = ("kind", "inputs", "grad_fn")

    def __init__(self, kind: str, inputs: tuple, grad_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Tensors are immutable once created, except for the ``grad`` buffer and
    the optimizer's velocity buffer; parameter data is mutated only through
    ``sgd_step``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_velocity")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._velocity: np.ndarray | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no graph history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return shift(scale(self, -1.0), other)
        return sub(other, self)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            if other == 0:
                raise DomainError("div: zero scalar denominator")
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        if _is_scalar(other):
            return div(Tensor(np.full(self.shape, float(other))), self)
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (np.ndarray, list, tuple)) or _is_scalar(x):
        return Tensor(x)
    raise TypeError(f"cannot interpret {type(x).__name__} as a Tensor")


def _result(kind: str, data: np.ndarray, inputs: tuple, grad_fn: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{kind}: produced non-finite values")
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(kind, inputs, grad_fn)
    return out


# -- elementwise binary primitives ---------------------------------------

def _broadcast_mode(kind: str, a: Tensor, b: Tensor) -> int:
    """0: equal shapes, 1: b broadcast over a's leading dim, 2: symmetric."""
    if a.shape == b.shape:
        return 0
    if a.shape[1:] == b.shape:
        return 1
    if b.shape[1:] == a.shape:
        return 2
    raise ShapeError(
        f"{kind}: incompatible shapes {a.shape} and {b.shape}; "
        "only a leading-dimension batch broadcast is supported"
    )


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _broadcast_mode("add", a, b)

    def grad_fn(g):
        ga = g.sum(axis=0) if mode == 2 else g
        gb = g.sum(axis=0) if mode == 1 else g
        return ga, gb

    return _result("add", a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _broadcast_mode("sub", a, b)

    def grad_fn(g):
        ga = g.sum(axis=0) if mode == 2 else g
        gb = -(g.sum(axis=0)) if mode == 1 else -g
        return ga, gb

    return _result("sub", a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _broadcast_mode("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g * bd
        gb = g * ad
        if mode == 1:
            gb = gb.sum(axis=0)
        elif mode == 2:
            ga = ga.sum(axis=0)
        return ga, gb

    return _result("mul", ad * bd, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _broadcast_mode("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: zero operand in denominator")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        if mode == 1:
            gb = gb.sum(axis=0)
        elif mode == 2:
            ga = ga.sum(axis=0)
        return ga, gb

    return _result("div", ad / bd, (a, b), grad_fn)


# -- scalar fast paths (mul/add with a python-float constant) -------------

def scale(t: Tensor, c) -> Tensor:
    t = _as_tensor(t)
    c = float(c)
    return _result("mul", t.data * c, (t,), lambda g: (g * c,))


def shift(t: Tensor, c) -> Tensor:
    t = _as_tensor(t)
    c = float(c)
    return _result("add", t.data + c, (t,), lambda g: (g,))


# -- unary primitives ------------------------------------------------------

def exp(t) -> Tensor:
    t = _as_tensor(t)
    with np.errstate(over="ignore"):
        data = np.exp(t.data)
    return _result("exp", data, (t,), lambda g: (g * data,))


def log(t) -> Tensor:
    t = _as_tensor(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log: non-positive operand")
    td = t.data
    return _result("log", np.log(td), (t,), lambda g: (g / td,))


def relu(t) -> Tensor:
    t = _as_tensor(t)
    mask = t.data > 0.0
    return _result("relu", np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def square(t) -> Tensor:
    t = _as_tensor(t)
    td = t.data
    return _result("square", td * td, (t,), lambda g: (g * (2.0 * td),))


def clamp(t, lo: float, hi: float) -> Tensor:
    t = _as_tensor(t)
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise DomainError(f"clamp: empty interval [{lo}, {hi}]")
    mask = (t.data >= lo) & (t.data <= hi)
    return _result("clamp", np.clip(t.data, lo, hi), (t,), lambda g: (g * mask,))


def softmax(t, axis: int = -1) -> Tensor:
    t = _as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((g - inner) * data,)

    return _result("softmax", data, (t,), grad_fn)


# -- reductions and shape ops ---------------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = tuple(a % ndim for a in axes)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return out


def sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _normalize_axes(axis, t.ndim)
    in_shape = t.shape
    data = t.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _result("sum", data, (t,), grad_fn)


def mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _normalize_axes(axis, t.ndim)
    in_shape = t.shape
    count = 1
    for a in axes:
        count *= in_shape[a]
    if count == 0:
        raise ShapeError("mean over an empty extent")
    data = t.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, in_shape).copy(),)

    return _result("mean", data, (t,), grad_fn)


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    in_shape = t.shape
    try:
        data = t.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {in_shape} as {tuple(shape)}") from err
    return _result("reshape", data, (t,), lambda g: (g.reshape(in_shape),))


def broadcast(t, n: int) -> Tensor:
    """Replicate ``t`` along a new leading dimension of extent ``n``."""
    t = _as_tensor(t)
    if n < 1:
        raise ShapeError(f"broadcast: leading extent must be >= 1, got {n}")
    data = np.broadcast_to(t.data, (n,) + t.shape).copy()
    return _result("broadcast", data, (t,), lambda g: (g.sum(axis=0),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _result("matmul", ad @ bd, (a, b), grad_fn)


# -- batch normalization ----------------------------------------------------

def batchnorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Training-mode batch normalization over axis 0 of a 2-D input.

    Normalizes with the batch's biased variance; evaluation-mode
    normalization with running statistics is an affine map and is composed
    from ``mul``/``add`` by the caller.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm: expects a 2-D input, got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ShapeError("batchnorm: batch statistics need at least 2 samples")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"batchnorm: scale/shift shapes {gamma.shape}/{beta.shape} do not match feature extent {d}"
        )
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return _result("batchnorm", gd * xhat + beta.data, (x, gamma, beta), grad_fn)


# -- 2-D convolution ---------------------------------------------------------

def conv2d(x, weight, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D convolution of ``x`` [N,C,H,W] with ``weight`` [O,C,K,K]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if ck != c:
        raise ShapeError(f"conv2d: kernel channels {ck} do not match input channels {c}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    k = kh
    p = int(padding)
    if h + 2 * p < k or w + 2 * p < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {(h + 2 * p, w + 2 * p)}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    data = np.einsum("ncijuv,ocuv->noij", win, weight.data, optimize=True)
    if bias is not None:
        data = data + bias.data[:, None, None]
    wd = weight.data

    def grad_fn(g):
        dw = np.einsum("noij,ncijuv->ocuv", g, win, optimize=True)
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(2, 3))
        wflip = wd[:, :, ::-1, ::-1]
        dxp = np.einsum("noabuv,ocuv->ncab", gwin, wflip, optimize=True)
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", data, inputs, grad_fn)


# -- the primitive dispatcher -------------------------------------------------

_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "relu": relu,
    "softmax": softmax,
    "square": square,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "broadcast": broadcast,
    "clamp": clamp,
    "batchnorm": batchnorm,
    "conv2d": conv2d,
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply one named primitive, recording it when any input requires grad."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind '{kind}'")
    return _PRIMITIVES[kind](*inputs, **kwargs)


# -- reverse pass --------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every requires-grad leaf.

    ``root`` must be scalar-shaped (a single element) and must have been
    produced by a recorded operation. Repeated calls keep accumulating until
    the grads are zeroed.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar-shaped, got {root.shape}")
    if root._node is None:
        raise ValueError("backward: root was not produced by a recorded operation")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t._node.inputs:
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))

    flowing: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for t in reversed(order):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        for inp, ig in zip(t._node.inputs, t._node.grad_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad = inp.grad + ig
            else:
                acc = flowing.get(id(inp))
                flowing[id(inp)] = ig if acc is None else acc + ig


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(
    params: Sequence[Tensor],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """Classical momentum update: v <- mu*v + g, p <- p - lr*v.

    Velocity buffers live on the parameter tensors and persist across calls.
    """
    if lr <= 0:
        raise ValueError(f"sgd_step: learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"sgd_step: momentum must lie in [0, 1), got {momentum}")
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient; run backward first")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            if p._velocity is None:
                p._velocity = np.zeros_like(p.data)
            p._velocity = momentum * p._velocity + g
            g = p._velocity
        p.data = p.data - lr * g
        if not np.all(np.isfinite(p.data)):
            raise DomainError("sgd_step: non-finite parameter after update")
