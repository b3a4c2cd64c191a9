"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (a context manager) only
when at least one input requires a gradient.  Outside a tape every op is a
plain numpy computation, which is what inference uses.

    with Tape() as tape:
        loss = reduce_sum(w * w)
    tape.backward(loss)
"""
from __future__ import annotations

import contextvars

import numpy as np

from ikqe import kernels

_ACTIVE = contextvars.ContextVar("ikqe_tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")
    # make numpy defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._leaf = True
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar constant is supported")
        return scale(self, 1.0 / other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x)


def parameter(x, name=None):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.records = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._leaf:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        # leaf accumulation happens above; drop references to intermediates
        self.records.clear()


def recording():
    """True inside an active :class:`Tape` context."""
    return _ACTIVE.get() is not None


def _record(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def logsigmoid(a):
    """log(sigmoid(x)) without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _record(out, (a,), lambda g: (g * _sigmoid(-x),))


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,))


def sqrt(a):
    a = as_tensor(a)
    s = np.sqrt(a.data)
    return _record(s, (a,), lambda g: (g * 0.5 / s,))


def clamp01(a):
    a = as_tensor(a)
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    return _record(np.clip(a.data, 0.0, 1.0), (a,), lambda g: (g * inside,))


def clamp(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), back)


# ------------------------------------------------------------ structural

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    a = as_tensor(a)
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a, idx):
    """Basic/advanced indexing with a scatter-add backward."""
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:  # views never repeat an element
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), back)


def gather_rows(a, idx):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather index out of range for {a.shape[0]} rows")
    if a.ndim == 1:
        return _record(a.data[idx], (a,),
                       lambda g: (kernels.segment_sum(g[:, None], idx, a.shape[0])[:, 0],))
    return _record(a.data[idx], (a,), lambda g: (kernels.segment_sum(g, idx, a.shape[0]),))


def scatter_add_rows(a, idx, num_rows):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError(f"scatter index out of range for {num_rows} rows")
    return _record(kernels.segment_sum(a.data, idx, num_rows), (a,), lambda g: (g[idx],))


def segment_reduce(a, segments, num_segments, op="sum"):
    """Reduce rows of ``a`` (M, d) into ``num_segments`` rows.

    Empty segments yield 0.  ``max``/``min`` route the gradient to the
    winning row, lowest row index on ties.
    """
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if op == "sum":
        return scatter_add_rows(a, seg, num_segments)
    if op == "mean":
        count = np.maximum(np.bincount(seg, minlength=num_segments), 1).astype(np.float64)[:, None]
        out = kernels.segment_sum(a.data, seg, num_segments) / count
        return _record(out, (a,), lambda g: ((g / count)[seg],))
    if op in ("max", "min"):
        fn = kernels.segment_max if op == "max" else kernels.segment_min
        out, arg = fn(a.data, seg, num_segments)
        m, d = a.shape

        def back(g):
            ga = np.zeros((m, d))
            valid = arg >= 0
            cols = np.broadcast_to(np.arange(d), arg.shape)
            np.add.at(ga, (arg[valid], cols[valid]), g[valid])
            return (ga,)

        return _record(out, (a,), back)
    raise ValueError(f"unknown segment op {op!r}")


def reduce_sum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), back)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def detach(a):
    return Tensor(as_tensor(a).data)


# ------------------------------------------------------------ parameters

class ParameterStore:
    """Named parameters plus Adam moment buffers."""

    def __init__(self):
        self.params = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value, trainable=True):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self.params[name] = t
        if trainable:
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def trainable(self):
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def num_parameters(self, trainable_only=True):
        return sum(t.data.size for t in self.params.values() if t.requires_grad or not trainable_only)

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        for k, arr in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != arr.shape:
                raise ValueError(f"shape mismatch for {k!r}: {self.params[k].shape} vs {arr.shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)


def adam_step(store: ParameterStore, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every trainable parameter; zeroes grads."""
    params = store.trainable()
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient buffer")
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, t in params.items():
        g = t.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.grad = np.zeros_like(t.data)
    return store
