"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values are stored as contiguous numpy arrays (float32 by default, float64
for verification runs). Every differentiable primitive records an entry on
a thread-local ComputationTape; backward() replays the tape in reverse,
accumulating adjoints into the ``grad`` buffers of tensors that requested
them. Tensors are never mutated by graph operations; only ``grad`` (and,
for optimizer steps, ``data`` of leaf parameters) changes in place.

Log-domain conventions: -inf is the canonical log-zero. log_sum_exp and
softmax use max-subtraction and return exact results (-inf, zeros) for
fully empty slices instead of NaN.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ComputationTape:
    """Ordered record of executed primitives, replayed in reverse by backward()."""

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.recording = True

    def record(self, out: "Tensor", backward_fn: Callable[[np.ndarray], None]):
        self.entries.append((out, backward_fn))

    def replay_reverse(self):
        # Each entry is visited exactly once; entries whose output never
        # received an adjoint are skipped (side branches of the graph).
        for out, fn in reversed(self.entries):
            if out.grad is not None:
                fn(out.grad)

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


class _TapeState(threading.local):
    def __init__(self):
        self.tape = ComputationTape()


_STATE = _TapeState()


def active_tape() -> ComputationTape:
    return _STATE.tape


class no_grad:
    """Context manager that suspends tape recording (evaluation mode)."""

    def __enter__(self):
        self._prev = _STATE.tape.recording
        _STATE.tape.recording = False
        return self

    def __exit__(self, *exc):
        _STATE.tape.recording = self._prev
        return False


class Tensor:
    """A dense n-dimensional array of reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar; all routing goes through the module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _STATE.tape
    if tape.recording and out.requires_grad:
        tape.record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    data = x.data * x.dtype.type(c)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * x.dtype.type(c))

    return _result(data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product [m,k] x [k,n] -> [m,n]."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _result(data, (a, b), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    data = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.transpose(g, inv))

    return _result(data, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _result(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _result(data, tensors, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` starting at `start`."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x.accumulate_grad(full)

    return _result(data, (x,), backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return _result(data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * data)

    return _result(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return _result(data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    data = (xd * phi).astype(x.dtype, copy=False)

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            x.accumulate_grad(g * (phi + xd * pdf).astype(x.dtype, copy=False))

    return _result(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; a slice that is entirely -inf yields all zeros."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax: NaN in input")
    m = np.max(xd, axis=axis, keepdims=True)
    safe_m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(xd - safe_m)
    denom = e.sum(axis=axis, keepdims=True)
    data = np.where(denom > 0, e / np.where(denom == 0, 1.0, denom), 0.0)
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            x.accumulate_grad(data * (g - inner))

    return _result(data, (x,), backward)


def log_sum_exp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) with max-subtraction; all -inf slices give -inf, not NaN."""
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    safe_m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(xd - safe_m)
    s = e.sum(axis=axis, keepdims=True)
    lse = np.where(np.isneginf(m), -np.inf, safe_m + np.log(np.where(s == 0, 1.0, s)))
    soft = np.where(s == 0, 0.0, e / np.where(s == 0, 1.0, s)).astype(x.dtype, copy=False)
    data = lse if keepdims else np.squeeze(lse, axis=axis)
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        if x.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axis)
            x.accumulate_grad(gk * soft)

    return _result(data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return sub(x, log_sum_exp(x, axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine map."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    data = (y * gain.data + bias.data).astype(x.dtype, copy=False)

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * y).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * y).mean(axis=-1, keepdims=True)
            x.accumulate_grad(((gy - m1 - y * m2) * inv).astype(x.dtype, copy=False))

    return _result(data, (x, gain, bias), backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of `table` by integer id."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"embedding: id out of range [0, {table.shape[0]})")
    data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table.accumulate_grad(gt)

    return _result(data, (table,), backward)


def select_index(x: Tensor, ids: Sequence[int]) -> Tensor:
    """Pick x[i, ids[i]] for each row i of a 2-D tensor."""
    idx = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"select_index: x {x.shape} vs ids {idx.shape}")
    rows = np.arange(x.shape[0])
    data = x.data[rows, idx].copy()

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            x.accumulate_grad(gx)

    return _result(data, (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    """Set positions where `mask` is True to `value` (zero gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    data = np.where(mask, x.dtype.type(value), x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, 0.0, g).astype(x.dtype, copy=False))

    return _result(data, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Bernoulli dropout, scaled by 1/(1-p); identity when not training or p=0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p={p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p)
    factor = x.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.dtype) * factor
    data = x.data * mask

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _result(data, (x,), backward)


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a tracked scalar; clears the tape."""
    if loss.ndim != 0 and loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require grad")
    tape = _STATE.tape
    try:
        loss.grad = np.ones_like(loss.data)
        tape.replay_reverse()
    finally:
        tape.clear()


def parameters_norm(grads: Iterable[np.ndarray]) -> float:
    """Global L2 norm over a collection of gradient arrays."""
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))
