"""Dense tensors with reverse-mode differentiation on a recording tape.

Values are numpy arrays; every operation computes its result eagerly and,
when a Tape is active, appends a node holding the adjoint closure. Walking
the tape in reverse accumulates gradients for every tensor that influenced
the loss. Tensors are treated as immutable values; only the training loop
mutates parameter storage in place, between tapes.

Verification work runs in float64 (the default); float32 may be selected
for training loops via set_default_dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "NormState",
    "set_default_dtype",
    "default_dtype",
    "default_eps",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "sqrt",
    "log",
    "narrow",
    "reshape",
    "transpose",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "l2_normalize",
    "batch_norm",
]

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def default_eps(dtype=None) -> float:
    """Normalization epsilon matched to the working precision."""
    dtype = np.dtype(dtype if dtype is not None else _DEFAULT_DTYPE)
    return 1e-6 if dtype == np.dtype(np.float32) else 1e-12


class Tensor:
    """Immutable dense array of reals. All ops guard against NaN/Inf."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        _check_finite(arr, "Tensor")
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str, check: bool = True) -> "Tensor":
        out = cls.__new__(cls)
        if check:
            _check_finite(arr, op)
        out.data = arr
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), "copy", check=False)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by '{op}'")


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE_TAPE: Optional["Tape"] = None


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Gradients:
    """Read-only map from tensor to its accumulated gradient array."""

    def __init__(self, table):
        self._table = table

    def get(self, tensor: Tensor):
        return self._table.get(id(tensor))

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._table[id(tensor)]
        except KeyError:
            raise KeyError("tensor did not participate in the recorded loss") from None

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._table


class Tape:
    """Append-only record of one forward computation.

    Nodes are appended in execution order, so reverse iteration is a valid
    reverse-topological walk. One tape per training step; nesting is not
    supported.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(tensor) for every tensor on the tape.

        Sequential reverse walk: bit-identical across repeated calls.
        """
        if loss.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        table: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self.nodes):
            grad_out = table.get(id(node.output))
            if grad_out is None:
                continue
            input_grads = node.backward(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None:
                    continue
                if grad.shape != tensor.shape:
                    raise ContractError(
                        f"adjoint of '{node.op}' produced shape {grad.shape} "
                        f"for input of shape {tensor.shape}"
                    )
                seen = table.get(id(tensor))
                if seen is None:
                    table[id(tensor)] = grad.copy() if grad is grad_out else grad
                else:
                    table[id(tensor)] = seen + grad
        return Gradients(table)


def _record(op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append(_Node(op, tuple(inputs), output, backward))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def _broadcast_op(op: str, a, b, fn, adjoint):
    # Python scalars adopt the tensor operand's dtype; a bare float64 zero-d
    # array would otherwise promote float32 pipelines under NEP 50 rules.
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and isinstance(a, (int, float)):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a = as_tensor(a)
    b = as_tensor(b)
    try:
        out_data = fn(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None
    out = Tensor._wrap(out_data, op)

    def backward(g):
        ga, gb = adjoint(g, a.data, b.data)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    _record(op, (a, b), out, backward)
    return out


def add(a, b) -> Tensor:
    return _broadcast_op("add", a, b, np.add, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _broadcast_op("sub", a, b, np.subtract, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product; covers scalar multiplication via broadcasting."""
    return _broadcast_op("mul", a, b, np.multiply, lambda g, x, y: (g * y, g * x))


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(-a.data, "neg", check=False)
    _record("neg", (a,), out, lambda g: (-g,))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(np.maximum(a.data, 0.0), "relu", check=False)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    _record("relu", (a,), out, backward)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Split by sign to avoid overflow in exp.
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor._wrap(s, "sigmoid", check=False)

    def backward(g):
        return (g * s * (1.0 - s),)

    _record("sigmoid", (a,), out, backward)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor._wrap(t, "tanh", check=False)

    def backward(g):
        return (g * (1.0 - t * t),)

    _record("tanh", (a,), out, backward)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="raise"):
        try:
            r = np.sqrt(a.data)
        except FloatingPointError:
            raise NumericError("sqrt of negative value") from None
    out = Tensor._wrap(r, "sqrt", check=False)

    def backward(g):
        denom = 2.0 * np.maximum(r, np.finfo(r.dtype).tiny)
        return (g / denom,)

    _record("sqrt", (a,), out, backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            l = np.log(a.data)
        except FloatingPointError:
            raise NumericError("log of non-positive value") from None
    out = Tensor._wrap(l, "log", check=False)

    def backward(g):
        return (g / a.data,)

    _record("log", (a,), out, backward)
    return out


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(
            f"reshape: cannot view shape {a.shape} as {shape}"
        ) from None
    out = Tensor._wrap(out_data, "reshape", check=False)
    orig = a.shape

    def backward(g):
        return (g.reshape(orig),)

    _record("reshape", (a,), out, backward)
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is not None:
        axes = tuple(int(x) for x in axes)
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(
                f"transpose: axes {axes} is not a permutation for ndim {a.ndim}"
            )
    out = Tensor._wrap(np.transpose(a.data, axes), "transpose", check=False)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    _record("transpose", (a,), out, backward)
    return out


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of zero tensors")
    try:
        out_data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
        ) from None
    out = Tensor._wrap(out_data, "concat", check=False)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    _record("concat", ts, out, backward)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    a = as_tensor(a)
    axis = int(axis) % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: slice [{start}:{start + length}) outside extent "
            f"{a.shape[axis]} of shape {a.shape}"
        )
    index = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(a.ndim)
    )
    out = Tensor._wrap(a.data[index], "narrow", check=False)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    _record("narrow", (a,), out, backward)
    return out


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(a % ndim for a in axis)
    return int(axis) % ndim


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    out = Tensor._wrap(np.sum(a.data, axis=axis, keepdims=keepdims), "reduce_sum",
                       check=False)
    in_shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    _record("reduce_sum", (a,), out, backward)
    return out


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    out = Tensor._wrap(np.mean(a.data, axis=axis, keepdims=keepdims), "reduce_mean",
                       check=False)
    in_shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([in_shape[ax] for ax in axes]))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, in_shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, in_shape).copy(),)

    _record("reduce_mean", (a,), out, backward)
    return out


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics (1-d operands promoted)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul requires operands of rank >= 1")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim >= 2 else b.shape[-1]
    if k_a != k_b:
        raise DimensionError(
            f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}"
        )
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"matmul: batch prefixes of {a.shape} and {b.shape} do not broadcast"
        ) from None
    out = Tensor._wrap(out_data, "matmul")

    a_vec = a.ndim == 1
    b_vec = b.ndim == 1

    def backward(g):
        a2 = a.data[np.newaxis, :] if a_vec else a.data
        b2 = b.data[:, np.newaxis] if b_vec else b.data
        g2 = g
        if a_vec and b_vec:
            g2 = g.reshape(1, 1)
        elif a_vec:
            g2 = np.expand_dims(g, -2)
        elif b_vec:
            g2 = np.expand_dims(g, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape)
        gb = _unbroadcast(gb, b2.shape)
        if a_vec:
            ga = ga.reshape(a.shape)
        if b_vec:
            gb = gb.reshape(b.shape)
        return (ga, gb)

    _record("matmul", (a, b), out, backward)
    return out


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------


def softmax(a, axis=-1) -> Tensor:
    """Max-subtracted softmax along one axis; rows sum to 1."""
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    with np.errstate(invalid="ignore"):  # inf input caught by the output check
        shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor._wrap(y, "softmax")

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    _record("softmax", (a,), out, backward)
    return out


def l2_normalize(a, axis=-1, eps=None) -> Tensor:
    """x / max(||x||_2, eps) along `axis`; a zero vector maps to zero."""
    a = as_tensor(a)
    if eps is None:
        eps = default_eps(a.dtype)
    if eps <= 0:
        raise ValueError("l2_normalize requires eps > 0")
    axis = _normalize_axis(axis, a.ndim)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = a.data / denom
    out = Tensor._wrap(y, "l2_normalize")
    clipped = norm < eps

    def backward(g):
        # Below eps the denominator is the constant eps, so the map is linear.
        dot = np.sum(g * y, axis=axis, keepdims=True)
        grad = np.where(clipped, g / denom, (g - y * dot) / denom)
        return (grad,)

    _record("l2_normalize", (a,), out, backward)
    return out


class NormState:
    """Running statistics for batch normalization (buffers, not learned)."""

    def __init__(self, width: int, momentum: float = 0.99, eps: float = 1e-5,
                 dtype=None):
        dtype = dtype if dtype is not None else default_dtype()
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def update(self, values: np.ndarray) -> None:
        """Fold one batch's per-feature moments into the running statistics."""
        rows = values.reshape(-1, values.shape[-1])
        if rows.shape[0] < 2:
            raise ContractError(
                "batch statistics need at least 2 rows (variance undefined)"
            )
        m = self.momentum
        self.running_mean[...] = m * self.running_mean \
            + (1.0 - m) * rows.mean(axis=0)
        self.running_var[...] = m * self.running_var \
            + (1.0 - m) * rows.var(axis=0)

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, table: dict) -> None:
        self.running_mean[...] = table["running_mean"]
        self.running_var[...] = table["running_var"]


def batch_norm(x, scale: Tensor, shift: Tensor, state: NormState,
               training: bool) -> Tensor:
    """Normalize the last axis per feature over all leading axes.

    Training: batch statistics are used and differentiated through, and the
    running statistics are updated with `state.momentum`. Inference: the
    frozen running statistics act as constants.
    """
    x = as_tensor(x)
    width = x.shape[-1]
    if scale.shape != (width,) or shift.shape != (width,):
        raise DimensionError(
            f"batch_norm: scale/shift must have shape ({width},), got "
            f"{scale.shape} and {shift.shape}"
        )
    lead = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    axes = tuple(range(x.ndim - 1))

    if training:
        if lead < 2:
            raise ContractError(
                "batch_norm in training mode needs a batch of at least 2"
            )
        mean = np.mean(x.data, axis=axes)
        var = np.var(x.data, axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mean) * inv_std
    y = x_hat * scale.data + shift.data
    out = Tensor._wrap(y, "batch_norm")

    if training:

        def backward(g):
            d_scale = np.sum(g * x_hat, axis=axes)
            d_shift = np.sum(g, axis=axes)
            d_xhat = g * scale.data
            term = (
                d_xhat
                - np.mean(d_xhat, axis=axes)
                - x_hat * np.mean(d_xhat * x_hat, axis=axes)
            )
            return (term * inv_std, d_scale, d_shift)

    else:

        def backward(g):
            d_scale = np.sum(g * x_hat, axis=axes)
            d_shift = np.sum(g, axis=axes)
            return (g * scale.data * inv_std, d_scale, d_shift)

    _record("batch_norm", (x, scale, shift), out, backward)
    return out
