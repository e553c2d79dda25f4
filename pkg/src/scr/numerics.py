"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` of the
calling thread; outside a tape they only compute values. Only the primitives
the message-passing model needs are provided, with row-vector broadcasting as
the single broadcasting rule.

    >>> x = Tensor([[3.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = hadamard(x, x)
    >>> backward(tape, y)
    >>> x.grad
    array([[6.]])
"""

import threading

import math

import numpy as np
import scipy.sparse as sp

from .errors import NotScalar, ShapeError

LAYER_NORM_EPS = 1e-5
STD_EPS = 1e-8

_local = threading.local()
_debug = False


def set_debug(flag):
    """Check every op output for non-finite values."""
    global _debug
    _debug = bool(flag)


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives, consumed by :func:`backward`."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_from_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        data = np.asarray(data, dtype=dtype)
        if data.dtype.kind not in "f":
            data = data.astype(np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        elif data.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return hadamard(self, other)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(value, parents, backward_fn):
    out = Tensor(value)
    if _debug and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced")
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._from_op = True
        tape.records.append((out, parents, backward_fn))
    return out


def backward(tape, loss, sink=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for recorded leaves.

    Leaf gradients are accumulated in double precision. With ``sink`` (a dict)
    they go to ``sink[id(leaf)]`` instead, leaving ``.grad`` untouched, so
    several tapes can run concurrently over shared parameters.
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._from_op:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            else:
                pg = np.asarray(pg, dtype=np.float64)
                if sink is not None:
                    key = id(parent)
                    sink[key] = sink[key] + pg if key in sink else pg.copy()
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


class Segments:
    """Row index of each message/edge plus cached scatter matrices.

    ``index[i]`` is the row that item ``i`` maps to among ``num_rows`` rows.
    """

    def __init__(self, index, num_rows):
        index = np.asarray(index, dtype=np.int64).reshape(-1)
        if len(index) and (index.min() < 0 or index.max() >= num_rows):
            raise IndexError("segment index out of range")
        self.index = index
        self.num_rows = int(num_rows)
        self._matrix = None
        self._counts = None

    def __len__(self):
        return len(self.index)

    @property
    def matrix(self):
        if self._matrix is None:
            m = len(self.index)
            self._matrix = sp.csr_matrix(
                (np.ones(m), (self.index, np.arange(m))), shape=(self.num_rows, m))
        return self._matrix

    @property
    def counts(self):
        if self._counts is None:
            self._counts = np.bincount(self.index, minlength=self.num_rows).astype(np.float64)
        return self._counts

    def sum(self, values):
        """Row sums in double precision, independent of item order."""
        return np.asarray(self.matrix @ values.astype(np.float64, copy=False))


def _segments(index, num_rows):
    return index if isinstance(index, Segments) else Segments(index, num_rows)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def _check_broadcast(a, b, op):
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]) \
            and not (a.shape[0] == 1 and a.shape[1] == b.shape[1]):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _result(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "hadamard")
    A, B = a.data, b.data
    return _result(A * B, (a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a, c):
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_norm(x, gamma=None, beta=None, eps=LAYER_NORM_EPS):
    """Row-wise normalization with optional affine ``gamma``/``beta`` rows."""
    x = as_tensor(x)
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    sigma = np.sqrt(((X - mu) ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = (X - mu) / sigma
    parents = [x]
    out = xhat
    G = B = None
    if gamma is not None:
        gamma = as_tensor(gamma)
        G = gamma.data
        out = out * G
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        B = beta.data
        out = out + B
        parents.append(beta)

    def grad(g):
        dxhat = g * G if G is not None else g
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / sigma
        grads = [dx]
        if G is not None:
            grads.append((g * xhat).sum(axis=0, keepdims=True))
        if B is not None:
            grads.append(g.sum(axis=0, keepdims=True))
        return grads

    return _result(out, tuple(parents), grad)


def concat(tensors):
    """Column-wise concatenation."""
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    value = np.concatenate([t.data for t in tensors], axis=1)
    return _result(value, tuple(tensors),
                   lambda g: [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))])


def gather_rows(x, index):
    """Rows ``x[index]``; ``index`` may be an int array or :class:`Segments`."""
    x = as_tensor(x)
    seg = _segments(index, x.shape[0])
    if seg.num_rows != x.shape[0]:
        raise ShapeError(f"gather_rows: segments over {seg.num_rows} rows, tensor has {x.shape[0]}")
    dtype = x.dtype
    return _result(x.data[seg.index], (x,), lambda g: (seg.sum(g).astype(dtype, copy=False),))


def scatter_add(messages, index, num_rows=None):
    """Sum message rows into ``num_rows`` target rows by ``index``."""
    messages = as_tensor(messages)
    seg = _segments(index, num_rows)
    if len(seg) != messages.shape[0]:
        raise ShapeError(f"scatter_add: {messages.shape[0]} messages, {len(seg)} indices")
    out = seg.sum(messages.data).astype(messages.dtype, copy=False)
    return _result(out, (messages,), lambda g: (g[seg.index],))


def segment_mean_std(messages, index, num_rows=None, eps=STD_EPS):
    """Per-row MEAN and population STD of incoming messages.

    Rows without messages get zero for both. STD is
    ``sqrt(var + eps) - sqrt(eps)``: smooth at zero variance, and exactly zero
    there so that all-zero states stay zero through a layer.
    """
    messages = as_tensor(messages)
    seg = _segments(index, num_rows)
    if len(seg) != messages.shape[0]:
        raise ShapeError(f"segment_mean_std: {messages.shape[0]} messages, {len(seg)} indices")
    dtype = messages.dtype
    counts = seg.counts[:, None]
    has = counts > 0
    denom = np.maximum(counts, 1.0)
    mean = seg.sum(messages.data) / denom
    centered = messages.data - mean[seg.index]
    var = seg.sum(centered ** 2) / denom
    guarded = np.sqrt(var + eps)
    std = np.where(has, guarded - math.sqrt(eps), 0.0)
    inv = np.where(has, 1.0 / (denom * guarded), 0.0)

    mean_t = _result(mean.astype(dtype), (messages,),
                     lambda g: (((g / denom)[seg.index]).astype(dtype, copy=False),))
    std_t = _result(std.astype(dtype), (messages,),
                    lambda g: (((g * inv)[seg.index] * centered).astype(dtype, copy=False),))
    return mean_t, std_t


def softplus(x):
    return np.logaddexp(0.0, x)


def bce_with_logits(logits, targets, weights=None):
    """Weighted sum of binary cross-entropies; defaults to the mean."""
    logits = as_tensor(logits)
    z = logits.data.reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: {z.shape} logits, {y.shape} targets")
    w = np.full(len(z), 1.0 / max(len(z), 1)) if weights is None \
        else np.asarray(weights, dtype=np.float64).reshape(-1)
    loss = np.sum(w * (softplus(z) - y * z))
    shape = logits.shape
    dtype = logits.dtype

    def grad(g):
        return ((g.reshape(-1)[0] * w * (_sigmoid(z.astype(np.float64)) - y))
                .reshape(shape).astype(dtype),)

    return _result(np.array([[loss]], dtype=dtype), (logits,), grad)


def finite_diff_check(f, params, h=1e-4, max_coords=512, seed=0, floor=0.1):
    """Worst relative gap between tape gradients and central differences.

    ``f`` builds a scalar loss :class:`Tensor` from ``params`` and must be
    deterministic. The gap per coordinate is ``|a - n| / max(|a|, |n|, floor)``,
    so a result below ``1e-3`` with the default floor means every coordinate
    agrees within ``max(1e-4 absolute, 1e-3 relative)``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
