"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive executions in order; :func:`backward` replays
them in reverse, accumulating gradients into every leaf created with
``requires_grad=True``. With no active tape, operations run as plain numpy and
cost nothing extra, which is the inference path used throughout the package.

Broadcasting is restricted to leading-axis expansion (a ``(J, E)`` array may
combine with ``(B, J, E)``); anything else must go through the explicit
``broadcast`` primitive. All data is float64, C-order.
"""

from __future__ import annotations

import numpy as np


class DiffMathError(Exception):
    """Base class for autodiff failures."""


class ShapeError(DiffMathError):
    """Operand shapes do not conform."""


class DomainError(DiffMathError):
    """Input outside a primitive's mathematical domain (log/sqrt of negatives)."""


class NonFiniteError(DiffMathError):
    """A NaN or Inf was created or detected."""


_ACTIVE_TAPE: "Tape | None" = None

# When True, every primitive output is checked for NaN/Inf (slow; used in tests).
# Domain-prone primitives (exp, log, sqrt, div) are always checked.
STRICT_FINITE = False


class Array:
    """Dense float64 array, optionally tracked for gradients.

    ``grad`` is populated by :func:`backward`; it stays ``None`` for arrays that
    did not participate in the differentiated graph.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("array created with NaN/Inf entries")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(data: np.ndarray, requires_grad: bool) -> "Array":
        out = Array.__new__(Array)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Array(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (thin wrappers over apply_primitive) ------------------

    def __add__(self, other):
        return apply_primitive("add", self, _as_array(other))

    def __radd__(self, other):
        return apply_primitive("add", _as_array(other), self)

    def __sub__(self, other):
        return apply_primitive("sub", self, _as_array(other))

    def __rsub__(self, other):
        return apply_primitive("sub", _as_array(other), self)

    def __mul__(self, other):
        return apply_primitive("mul", self, _as_array(other))

    def __rmul__(self, other):
        return apply_primitive("mul", _as_array(other), self)

    def __truediv__(self, other):
        return apply_primitive("div", self, _as_array(other))

    def __rtruediv__(self, other):
        return apply_primitive("div", _as_array(other), self)

    def __neg__(self):
        return apply_primitive("mul", self, _as_array(-1.0))

    def __matmul__(self, other):
        return apply_primitive("matmul", self, _as_array(other))

    def __getitem__(self, key):
        return apply_primitive("slice", self, key=key)

    def exp(self):
        return apply_primitive("exp", self)

    def log(self):
        return apply_primitive("log", self)

    def tanh(self):
        return apply_primitive("tanh", self)

    def sqrt(self):
        return apply_primitive("sqrt", self)

    def square(self):
        return apply_primitive("square", self)

    def sin(self):
        return apply_primitive("sin", self)

    def cos(self):
        return apply_primitive("cos", self)

    def leaky_relu(self, slope: float = 0.01):
        return apply_primitive("leaky_relu", self, slope=slope)

    def softmax(self, axis: int = -1):
        return apply_primitive("softmax", self, axis=axis)

    def log_softmax(self, axis: int = -1):
        return apply_primitive("log_softmax", self, axis=axis)

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", self, axis=axis, keepdims=keepdims)

    def transpose(self, axes=None):
        return apply_primitive("transpose", self, axes=axes)

    def reshape(self, shape):
        return apply_primitive("reshape", self, shape=shape)

    def broadcast(self, shape):
        return apply_primitive("broadcast", self, shape=shape)

    def gather(self, indices, axis: int = 0):
        return apply_primitive("gather", self, indices=indices, axis=axis)

    def layer_norm(self, eps: float = 1e-5):
        return apply_primitive("layer_norm", self, eps=eps)


def _as_array(x) -> Array:
    if isinstance(x, Array):
        return x
    return Array(x)


def concat(arrays, axis: int = -1) -> Array:
    return apply_primitive("concat", *[_as_array(a) for a in arrays], axis=axis)


class Tape:
    """Ordered record of executed primitives; a context manager.

    Execution order is a topological order by construction, so the backward
    pass is a single reverse sweep. Tapes are single-threaded; concurrent
    training runs each own a private tape.
    """

    def __init__(self):
        self.nodes = []  # (out Array, inputs tuple, backward fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise DiffMathError("a tape is already active (tapes do not nest)")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out: Array, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def backward(root: Array, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tracked leaf.

    ``root`` must be scalar and produced on the tape. A leaf feeding several
    paths receives the sum of all contributions. Leaves that did not reach the
    root keep ``grad=None`` (read as zero via :func:`grad_of`).
    """
    tape = tape if tape is not None else _ACTIVE_TAPE
    if tape is None:
        raise DiffMathError("backward requires an active or explicit tape")
    if root.data.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    if not any(node[0] is root for node in tape.nodes):
        raise DiffMathError("root is not on the tape (detached graph)")
    root.grad = np.ones((), dtype=np.float64)
    for out, inputs, backward_fn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        backward_fn(g)


def grad_of(a: Array) -> np.ndarray:
    """Gradient of the last backward pass w.r.t. ``a`` (zeros if unused)."""
    if a.grad is None:
        return np.zeros(a.data.shape, dtype=np.float64)
    return a.grad


def _accumulate(a: Array, g: np.ndarray) -> None:
    # gradients are never mutated in place: the first contribution may alias
    # upstream storage, later ones make a fresh array
    if a.grad is None:
        a.grad = g
    else:
        a.grad = a.grad + g


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient over axes that were leading-expanded in the forward."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    # size-1 axes expanded by the explicit broadcast primitive
    keep = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if gs != s)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _leading_broadcastable(sa, sb):
    """True when the shorter shape equals the trailing axes of the longer."""
    if len(sa) <= len(sb):
        return sa == sb[len(sb) - len(sa):]
    return sb == sa[len(sa) - len(sb):]


def _check_elementwise(name, a, b):
    if a.data.shape == b.data.shape:
        return
    if not _leading_broadcastable(a.data.shape, b.data.shape):
        raise ShapeError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} only combine via "
            "leading-axis expansion; use broadcast() for anything else"
        )


_DOMAIN_CHECKED = frozenset({"exp", "log", "sqrt", "div"})


def apply_primitive(name: str, *inputs: Array, **params) -> Array:
    """Execute one primitive, recording it on the active tape.

    Raises ``ShapeError`` for non-conforming shapes, ``DomainError`` for
    log/sqrt outside their domain, and ``NonFiniteError`` when a checked
    primitive produces NaN/Inf.
    """
    try:
        forward = _PRIMITIVES[name]
    except KeyError:
        raise DiffMathError(f"unknown primitive {name!r}") from None
    out_data, backward_fn = forward(*inputs, **params)
    if name in _DOMAIN_CHECKED or STRICT_FINITE:
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"primitive {name!r} produced NaN/Inf")
    requires = any(i.requires_grad for i in inputs)
    out = Array._wrap(np.asarray(out_data, dtype=np.float64), requires)
    tape = _ACTIVE_TAPE
    if tape is not None and requires:
        tape._record(out, inputs, backward_fn)
    return out


# -- primitive definitions -----------------------------------------------------
# Each returns (out_data, backward_fn); backward_fn takes the upstream gradient
# and accumulates into the inputs that require grad.


def _prim_add(a, b):
    _check_elementwise("add", a, b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to_shape(g, b.data.shape))

    return out, bwd


def _prim_sub(a, b):
    _check_elementwise("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to_shape(-g, b.data.shape))

    return out, bwd


def _prim_mul(a, b):
    _check_elementwise("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to_shape(g * a.data, b.data.shape))

    return out, bwd


def _prim_div(a, b):
    _check_elementwise("div", a, b)
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return out, bwd


def _prim_matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires >=2-D operands; reshape vectors first")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    # stacked @ 2-D weight is the hot path: run it as one flat GEMM
    if b.data.ndim == 2 and a.data.ndim > 2:
        k = a.data.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.data.shape[:-1] + (b.data.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            if b.data.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.data.shape)
            else:
                ga = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
            _accumulate(a, ga)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim >= 2:
                k = a.data.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
            _accumulate(b, gb)

    return out, bwd


def _prim_exp(a):
    with np.errstate(over="ignore"):  # overflow is caught by the finite check
        out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * out)

    return out, bwd


def _prim_log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return out, bwd


def _prim_sqrt(a):
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / out)

    return out, bwd


def _prim_square(a):
    out = a.data * a.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * 2.0 * a.data)

    return out, bwd


def _prim_tanh(a):
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out * out))

    return out, bwd


def _prim_sin(a):
    out = np.sin(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * np.cos(a.data))

    return out, bwd


def _prim_cos(a):
    out = np.cos(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, -g * np.sin(a.data))

    return out, bwd


def _prim_leaky_relu(a, slope=0.01):
    mask = a.data > 0.0
    out = np.where(mask, a.data, slope * a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, np.where(mask, g, slope * g))

    return out, bwd


def _prim_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            _accumulate(a, out * (g - dot))

    return out, bwd


def _prim_log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return out, bwd


def _prim_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return out, bwd


def _prim_mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]

    def bwd(g):
        if not a.requires_grad:
            return
        gg = g / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return out, bwd


def _prim_concat(*arrays, axis=-1):
    if not arrays:
        raise ShapeError("concat of zero arrays")
    out = np.concatenate([a.data for a in arrays], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [a.data.shape[ax] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for a, lo, hi in zip(arrays, offsets[:-1], offsets[1:]):
            if a.requires_grad:
                key = tuple(slice(None) for _ in range(ax)) + (slice(lo, hi),)
                _accumulate(a, g[key])

    return out, bwd


def _prim_slice(a, key=None):
    out = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros(a.data.shape, dtype=np.float64)
            full[key] = g
            _accumulate(a, full)

    return np.ascontiguousarray(out), bwd


def _prim_transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, np.transpose(g, inv))

    return np.ascontiguousarray(out), bwd


def _prim_reshape(a, shape=None):
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return out, bwd


def _prim_broadcast(a, shape=None):
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g, a.data.shape))

    return np.ascontiguousarray(out), bwd


def _prim_layer_norm(a, eps=1e-5):
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bwd(g):
        if a.requires_grad:
            m1 = g.mean(axis=-1, keepdims=True)
            m2 = (g * out).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (g - m1 - out * m2))

    return out, bwd


def _prim_gather(a, indices=None, axis=0):
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros(a.data.shape, dtype=np.float64)
            np.add.at(full, _gather_key(a.data.ndim, axis, idx), g)
            _accumulate(a, full)

    return out, bwd


def _gather_key(ndim, axis, idx):
    ax = axis if axis >= 0 else ndim + axis
    return tuple(slice(None) for _ in range(ax)) + (idx,)


_PRIMITIVES = {
    "add": _prim_add,
    "sub": _prim_sub,
    "mul": _prim_mul,
    "div": _prim_div,
    "matmul": _prim_matmul,
    "exp": _prim_exp,
    "log": _prim_log,
    "sqrt": _prim_sqrt,
    "square": _prim_square,
    "tanh": _prim_tanh,
    "sin": _prim_sin,
    "cos": _prim_cos,
    "leaky_relu": _prim_leaky_relu,
    "softmax": _prim_softmax,
    "log_softmax": _prim_log_softmax,
    "sum": _prim_sum,
    "mean": _prim_mean,
    "concat": _prim_concat,
    "slice": _prim_slice,
    "transpose": _prim_transpose,
    "reshape": _prim_reshape,
    "broadcast": _prim_broadcast,
    "layer_norm": _prim_layer_norm,
    "gather": _prim_gather,
}

PRIMITIVE_NAMES = tuple(sorted(_PRIMITIVES))


# -- composed helpers ----------------------------------------------------------


def relu(a: Array) -> Array:
    return a.leaky_relu(0.0)


def softplus(a: Array) -> Array:
    """log(1 + exp(a)), overflow-safe: relu(a) + log(1 + exp(-|a|))."""
    absa = relu(a) + relu(-a)
    return relu(a) + ((-absa).exp() + 1.0).log()


def maximum_const(a: Array, c: float) -> Array:
    """Elementwise max(a, c) built from relu."""
    return relu(a - c) + c


def grad_check(f, x: Array, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps an Array to a scalar Array; the error per coordinate is
    |analytic − fd| / max(1, |analytic|).
    """
    leaf = Array(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        if out.data.shape != ():
            raise ShapeError("grad_check target must return a scalar")
        backward(out, tape)
    analytic = grad_of(leaf)

    flat = x.data.copy().reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Array(flat.reshape(x.data.shape))).item()
        flat[i] = orig - h
        fm = f(Array(flat.reshape(x.data.shape))).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * h)
    fd = fd.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom))
