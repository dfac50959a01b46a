"""Dense tensors with reverse-mode automatic differentiation.

The engine is intentionally small: 2-D matrices (plus 1-D vectors and 0-D
scalars where an operation says so), float64 by default, float32 opt-in
for the benchmark harness. Operations executed while a :class:`Tape` is
active append a record with the saved values needed for their backward
pass; ``backward(loss)`` replays the records in exact reverse execution
order and accumulates adjoints additively per tensor.

Broadcasting is restricted to bias-add over rows; every other shape
mismatch is an error. ``matmul`` and ``conv1d`` report their
multiply-accumulate counts to an active :class:`MacCounter`, which is how
the cost model's instrumented oracle works.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError

_REAL_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_uid = itertools.count(1)
_state = threading.local()

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _active_tape():
    return getattr(_state, "tape", None)


def _active_macs():
    return getattr(_state, "macs", None)


class Tensor:
    """Immutable dense value, optionally tracked by a gradient tape.

    ``data`` is a numpy array; ``grad_id`` is the handle under which tapes
    accumulate this tensor's adjoint; ``tape`` is the tape that recorded
    the op producing it (None for leaves and constants). Tensor values
    must not be written through after creation; training code rebinds
    ``.data`` between tapes instead.
    """

    __slots__ = ("data", "grad_id", "tape")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _REAL_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad_id = next(_uid)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a single-element tensor, shape {self.shape}")
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    # Operator sugar; all semantics live in the module-level functions.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class GradientMap:
    """Gradients from one backward pass, keyed by tensor."""

    def __init__(self, grads: dict):
        self._by_id = grads

    def __contains__(self, t: Tensor) -> bool:
        return t.grad_id in self._by_id

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._by_id[t.grad_id]
        except KeyError:
            raise KeyError("no gradient was recorded for this tensor") from None

    def get(self, t: Tensor, default=None):
        return self._by_id.get(t.grad_id, default)


class Tape:
    """Ordered record of executed operations.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded. ``gradients(loss)`` walks the record in reverse execution
    order exactly once, after which the tape is consumed.
    """

    def __init__(self):
        self._records = []  # (out_id, input_ids, backward_fn)
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise UsageError("a gradient tape is already active in this context")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, out: Tensor, inputs: tuple, backward):
        if self._consumed:
            raise UsageError("tape was already consumed by a backward pass")
        out.tape = self
        self._records.append((out.grad_id, tuple(t.grad_id for t in inputs), backward))

    def gradients(self, loss: Tensor) -> GradientMap:
        """Reverse sweep from a scalar loss; consumes the tape."""
        if self._consumed:
            raise UsageError("tape was already consumed by a backward pass")
        if loss.tape is not self:
            raise UsageError("loss was not produced on this tape")
        if loss.data.shape != ():
            raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        grads = {loss.grad_id: np.ones((), dtype=loss.data.dtype)}
        for out_id, input_ids, backward_fn in reversed(self._records):
            g = grads.pop(out_id, None)
            if g is None:
                continue  # output never reached the loss
            for in_id, in_grad in zip(input_ids, backward_fn(g)):
                if in_grad is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = in_grad if acc is None else acc + in_grad
        self._records = []
        return GradientMap(grads)


def backward(loss: Tensor) -> GradientMap:
    """Gradient map for a scalar loss produced on a live tape."""
    if loss.tape is None:
        raise UsageError("loss was not produced on a live tape")
    return loss.tape.gradients(loss)


class MacCounter:
    """Counts multiply-accumulates executed by matmul and conv1d.

    Elementwise work (softmax, layer norm, activations, pooling) is
    deliberately not counted; the analytic cost model excludes it too.
    """

    def __init__(self):
        self.total = 0
        self.by_scope = {}
        self._stack = []

    def add(self, n: int):
        self.total += n
        label = self._stack[-1] if self._stack else "unscoped"
        self.by_scope[label] = self.by_scope.get(label, 0) + n

    @contextmanager
    def scope(self, label: str):
        self._stack.append(label)
        try:
            yield
        finally:
            self._stack.pop()


@contextmanager
def count_macs():
    """Activate a fresh MacCounter for the duration of the block."""
    if _active_macs() is not None:
        raise UsageError("a MAC counter is already active in this context")
    counter = MacCounter()
    _state.macs = counter
    try:
        yield counter
    finally:
        _state.macs = None


@contextmanager
def mac_scope(label: str):
    """Attribute MACs inside the block to `label` (no-op if not counting)."""
    counter = _active_macs()
    if counter is None:
        yield
    else:
        with counter.scope(label):
            yield


def _wrap(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Make the result tensor and record it if a tape is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad_id = next(_uid)
    out.tape = None
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    macs = _active_macs()
    if macs is not None:
        macs.add(a.shape[0] * a.shape[1] * b.shape[1])
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _wrap(ad @ bd, (a, b), bwd)


def add(a, b) -> Tensor:
    """Elementwise sum; a 1-D right operand is broadcast over rows (bias)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def bwd(g):
            return g, g

        return _wrap(a.data + b.data, (a, b), bwd)
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        def bwd_bias(g):
            return g, g.sum(axis=0)

        return _wrap(a.data + b.data, (a, b), bwd_bias)
    raise ShapeError(f"add supports equal shapes or row-bias, got {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub requires equal shapes, got {a.shape} and {b.shape}")

    def bwd(g):
        return g, -g

    return _wrap(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul requires equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _wrap(ad * bd, (a, b), bwd)


def scale(a, c) -> Tensor:
    """Multiply by a Python scalar."""
    a = as_tensor(a)
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _wrap(a.data * c, (a,), bwd)


def gelu(a) -> Tensor:
    """GELU in its tanh form."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)

    def bwd(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * d,)

    return _wrap(0.5 * x * (1.0 + t), (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _wrap(np.where(mask, a.data, 0.0), (a,), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-D tensor, got shape {a.shape}")

    def bwd(g):
        return (g.T,)

    # copy so downstream BLAS calls see contiguous data
    return _wrap(np.ascontiguousarray(a.data.T), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.data.size} values) to {shape}")
    old_shape = a.data.shape

    def bwd(g):
        return (g.reshape(old_shape),)

    return _wrap(a.data.reshape(shape), (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    """Concatenate 2-D tensors along rows (axis 0) or columns (axis 1)."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat requires at least one tensor")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    other = 1 - axis
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 2 or p.shape[other] != ref[other]:
            raise ShapeError(
                f"concat shapes disagree on axis {other}: {[tuple(p.shape) for p in parts]}"
            )
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(sizes)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _wrap(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_rows requires a 2-D tensor, got shape {a.shape}")
    n = a.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {n} rows")
    shape = a.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[start:stop, :] = g
        return (out,)

    return _wrap(a.data[start:stop, :].copy(), (a,), bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_cols requires a 2-D tensor, got shape {a.shape}")
    m = a.shape[1]
    if not (0 <= start < stop <= m):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {m} columns")
    shape = a.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return _wrap(a.data[:, start:stop].copy(), (a,), bwd)


def sum_all(a) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    a = as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _wrap(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bwd)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size

    def bwd(g):
        return (np.full(shape, float(g) / n, dtype=g.dtype),)

    return _wrap(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bwd)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction for overflow safety."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows requires a 2-D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _wrap(y, (a,), bwd)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by an affine map.

    Each row is shifted to zero mean and scaled to unit variance (up to
    ``eps``) before applying gamma/beta.
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if a.ndim != 2 or a.shape[1] < 1:
        raise ShapeError(f"layer_norm requires an N x D tensor with D >= 1, got {a.shape}")
    if gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise ShapeError(
            f"layer_norm affine parameters must have shape ({a.shape[1]},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    gd = gamma.data

    def bwd(g):
        dgamma = (g * y).sum(axis=0)
        dbeta = g.sum(axis=0)
        dy = g * gd
        dx = inv * (dy - dy.mean(axis=1, keepdims=True) - y * (dy * y).mean(axis=1, keepdims=True))
        return dx, dgamma, dbeta

    return _wrap(y * gd + beta.data, (a, gamma, beta), bwd)


def conv1d(a, w, stride: int = 1, groups: int = 1) -> Tensor:
    """Strided grouped 1-D convolution over time-major input.

    ``a`` is (L, C_in), ``w`` is (C_out, C_in // groups, k); output length
    is floor((L - k) / stride) + 1. No implicit padding.
    """
    a, w = as_tensor(a), as_tensor(w)
    if a.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d requires (L, C_in) input and (C_out, C_in/g, k) weights, "
                         f"got {a.shape} and {w.shape}")
    stride = int(stride)
    groups = int(groups)
    c_out, c_in_g, k = w.shape
    length, c_in = a.shape
    if stride < 1 or k < 1:
        raise ConfigError(f"conv1d stride and kernel must be >= 1, got stride={stride}, k={k}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigError(f"conv1d groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_in_g != c_in // groups:
        raise ShapeError(f"conv1d weight expects C_in/groups={c_in // groups} channels, "
                         f"got {c_in_g}")
    if length < k:
        raise ShapeError(f"conv1d input length {length} is shorter than kernel {k}")
    l_out = (length - k) // stride + 1
    macs = _active_macs()
    if macs is not None:
        macs.add(l_out * c_out * c_in_g * k)

    windows = sliding_window_view(a.data, k, axis=0)[::stride]  # (l_out, C_in, k)
    out = np.empty((l_out, c_out), dtype=a.data.dtype)
    co_g = c_out // groups
    for g_idx in range(groups):
        cs, ce = g_idx * c_in_g, (g_idx + 1) * c_in_g
        os, oe = g_idx * co_g, (g_idx + 1) * co_g
        out[:, os:oe] = np.tensordot(windows[:, cs:ce, :], w.data[os:oe], ([1, 2], [1, 2]))
    wd = w.data

    def bwd(g):
        dw = np.empty_like(wd)
        dx = np.zeros((length, c_in), dtype=g.dtype)
        for gi in range(groups):
            cs, ce = gi * c_in_g, (gi + 1) * c_in_g
            os, oe = gi * co_g, (gi + 1) * co_g
            dw[os:oe] = np.tensordot(g[:, os:oe], windows[:, cs:ce, :], ([0], [0]))
            # (l_out, C_in_g, k) contributions scattered back over windows
            contrib = np.tensordot(g[:, os:oe], wd[os:oe], ([1], [0]))
            for j in range(k):
                dx[j:j + stride * l_out:stride, cs:ce] += contrib[:, :, j]
        return dx, dw

    return _wrap(out, (a, w), bwd)
