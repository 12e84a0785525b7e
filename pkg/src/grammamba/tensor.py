"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the active :class:`Tape`
when at least one of its inputs requires a gradient. :func:`backward` walks
the tape in reverse and accumulates gradients into leaf tensors.

Only scalar-with-tensor broadcasting is supported by the elementwise ops;
anything else needs an explicit reshape. :func:`linear` is the one fused
exception (bias added per output feature), since every projection needs it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_state = {"tape": Tape(), "grad_enabled": True, "checked": False}


def get_tape() -> Tape:
    return _state["tape"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise :class:`NonFiniteError` whenever an op produces NaN or Inf."""
    prev = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = prev


def is_checked() -> bool:
    return _state["checked"]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str = "op") -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` receives the output gradient and must return one array
    (or ``None``) per input, in order.
    """
    if _state["checked"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._is_leaf = False
    needs = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _state["tape"].record(out, tuple(inputs), backward)
    return out


def backward(loss: Tensor, clear: bool = True) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays; zero them between
    steps. The tape is cleared afterwards unless ``clear`` is False.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state["tape"]
    if not loss.requires_grad:
        if clear:
            tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._is_leaf:
                leaves[key] = t
    if loss._is_leaf:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    if clear:
        tape.clear()


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand: gradient is the total
    if t.shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if _state["checked"] and not np.all(np.isfinite(y)):
        raise NonFiniteError("exp: overflow produced non-finite values")
    return make_op(y, (a,), lambda g: (g * y,), "exp")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return make_op(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return make_op(y, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    y = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_op(np.asarray(y, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))
    y = np.mean(a.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)

    return make_op(np.asarray(y, dtype=np.float64), (a,), bw, "mean")


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_op(y, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(y, tuple(parts), bw, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    y = np.stack([p.data for p in parts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return make_op(y, tuple(parts), bw, "stack")


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    shape = a.shape
    y = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return make_op(np.array(y), (a,), bw, "take")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[..., m, n]`` with a 2-D ``b[n, p]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(y, inputs, bw, "linear")


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [B, K], got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ContractError("softmax_cross_entropy: need at least 2 classes")
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {n}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return make_op(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def squared_error(pred: Tensor, target) -> Tensor:
    """Batch mean of squared Euclidean distance between rows."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"squared_error: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = pred.shape[0]
    val = np.sum(diff * diff) / n
    return make_op(np.asarray(val), (pred,), lambda g: (2.0 * float(g) * diff / n,), "squared_error")


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The gap at each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    All ``inputs`` are differentiated, whatever their ``requires_grad`` flag.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check: eps={eps} outside [1e-7, 1e-3]")
    inputs = list(inputs)
    saved_flags = [t.requires_grad for t in inputs]
    tape = get_tape()
    tape.clear()
    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        loss = f(*inputs)
        if loss.data.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
        worst = 0.0
        with no_grad():
            for ti, t in enumerate(inputs):
                flat = t.data.reshape(-1)
                an = analytic[ti].reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f(*inputs).item()
                    flat[i] = orig - eps
                    fm = f(*inputs).item()
                    flat[i] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise NonFiniteError(f"grad_check: non-finite value at input {ti}, coordinate {i}")
                    num = (fp - fm) / (2.0 * eps)
                    if not math.isfinite(an[i]):
                        raise NonFiniteError(f"grad_check: non-finite analytic gradient at input {ti}, coordinate {i}")
                    worst = max(worst, abs(an[i] - num) / max(1.0, abs(num)))
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
            t.grad = None
        tape.clear()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
