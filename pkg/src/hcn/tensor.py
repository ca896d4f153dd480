"""Dense tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it, and
``tape.backward(loss)`` walks the recording once in reverse.  Outside of a
tape every op is a plain numpy computation, which is what serving uses.

Tensors carry at most three axes.  A leading batch axis is allowed on every
op; the only implicit broadcast is a ``1 x p`` bias added over rows.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A numpy array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"tensors have at most 3 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, used sparingly in tests
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor that always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParamSet:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise KeyError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter value, keyed by name."""
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)}")
        for k, p in self._params.items():
            value = np.asarray(state[k])
            if value.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


# --------------------------------------------------------------------------
# tape

class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Records ops in execution order while active (``with Tape() as t``)."""

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Intermediate gradients live only for the duration of the call.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is not None:
                    # leaf: user-created tensor with a gradient buffer
                    t.grad += gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].ops.append(_Op(tuple(inputs), out, backward_fn))
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


# --------------------------------------------------------------------------
# ops

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported pairs: 2D@2D, 3D@2D (one matrix shared over the batch) and
    3D@3D with equal batch size.
    """
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2] or (
            a.ndim == 3 and b.ndim == 3 and sa[0] != sb[0]) or (a.ndim == 2 and b.ndim == 3):
        raise ShapeError(f"matmul: cannot multiply {sa} by {sb}")
    out = a.data @ b.data

    def back(g):
        ga = g @ _swap(b.data) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            else:
                gb = _swap(a.data) @ g
        return ga, gb

    return _record(out, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    def back(g):
        return (_swap(g),)
    return _record(np.ascontiguousarray(_swap(x.data)), (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return _record(x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape ``1 x p`` broadcast over all rows."""
    if b.ndim != 2 or b.shape[0] != 1 or x.shape[-1] != b.shape[1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    p = b.shape[1]
    return _record(x.data + b.data, (x, b),
                   lambda g: (g, g.reshape(-1, p).sum(axis=0, keepdims=True)))


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b``."""
    return add_bias(matmul(x, W), b)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,),
                   lambda g: (g * pos,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()).reshape(1, 1), (x,),
                   lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    """Sum over ``axis`` keeping the axis (size 1)."""
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)
    return _record(x.data.sum(axis=axis, keepdims=True), (x,), back)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks VALID positions; masked
    entries get weight exactly 0 and a row with no valid entry is all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)
    out = out.astype(x.data.dtype, copy=False)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), back)


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, in argument order."""
    if not parts:
        raise ShapeError("concat_features needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_features: leading shape {p.shape[:-1]} != {lead}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([p.data for p in parts], axis=-1)

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), back)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a single row (``... x 1 x D``) into ``... x n x D``."""
    if x.shape[-2] != 1:
        raise ShapeError(f"repeat_rows expects one row, got {x.shape}")
    reps = (1,) * (x.ndim - 2) + (n, 1)
    return _record(np.tile(x.data, reps), (x,),
                   lambda g: (g.sum(axis=-2, keepdims=True),))


def gather_rows(table: Tensor, index: np.ndarray, padding_idx: Optional[int] = None) -> Tensor:
    """Look up rows of a 2D table (or the first axis of a 3D tensor).

    ``index`` may be 1D or 2D integers.  Rows selected by ``padding_idx`` come
    out as zeros and send no gradient back.
    """
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise TypeError("gather_rows needs an integer index")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(
            f"index out of range for table with {table.shape[0]} rows "
            f"(got min {index.min()}, max {index.max()})")
    out = table.data[index]
    keep = None
    if padding_idx is not None:
        keep = (index != padding_idx)
        out = out * keep.reshape(keep.shape + (1,) * (out.ndim - index.ndim))
    if out.ndim > 3:
        raise ShapeError(f"gather_rows result would have shape {out.shape}")

    def back(g):
        if keep is not None:
            g = g * keep.reshape(keep.shape + (1,) * (g.ndim - index.ndim))
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(out, (table,), back)


def sigmoid_bce(y: Tensor, label) -> Tensor:
    """Mean binary cross-entropy on logits, in the fused stable form.

    ``max(y, 0) - y*t + log1p(exp(-|y|))`` equals the naive expression for
    every finite ``y`` without overflowing.
    """
    t = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=y.data.dtype)
    t = t.reshape(y.shape)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("sigmoid_bce labels must be 0 or 1")
    z = y.data
    m = z.size
    losses = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(losses.mean()).reshape(1, 1)

    def back(g):
        return (g.reshape(()) * (sigmoid(z) - t) / m,)

    return _record(out, (y,), back)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# initialisation

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


# --------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with no arguments and must read ``x`` (typically a
    parameter) to produce a scalar.  The error for one entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    analytic = _analytic_grad(f, x)
    numeric = numeric_grad(f, x, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.data.size else 0.0


def _analytic_grad(f: Callable[[], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    g = x.grad.copy()
    x.requires_grad = was
    x.grad = np.zeros_like(x.data) if was else None
    return g


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x``."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data.sum())
        flat[i] = orig - eps
        lo = float(f().data.sum())
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)
