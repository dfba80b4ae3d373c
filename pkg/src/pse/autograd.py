"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers (float32 by default, float64 for
gradient checking). Ops executed while a Tape is active append records in
execution order; Tape.backward replays them in reverse and accumulates
gradients into every tensor with requires_grad set.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_MASK_FILL = -1e30

_ACTIVE_TAPE = None


class AutogradError(Exception):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise AutogradError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered op record list; records are appended in execution order, so
    the list is already topologically sorted for the reverse sweep."""

    def __init__(self):
        self._records = []  # (output, inputs, backward_fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise AutogradError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(tensor) into .grad for every requires_grad
        tensor that participated in this tape."""
        if loss.data.size != 1:
            raise AutogradError("backward requires a scalar loss")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward_fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left in `grads` belongs to leaves; flush into .grad
        by_id = {}
        for _, inputs, _ in self._records:
            for t in inputs:
                by_id[id(t)] = t
        for key, g in grads.items():
            t = by_id.get(key)
            if t is not None and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def _record(out, inputs, backward_fn):
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE._records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b):
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def matmul(a, b):
    """Matrix product over the last two axes; leading axes must match."""
    if a.shape[-1] != b.shape[-2]:
        raise AutogradError(f"matmul inner dims mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def power_compress(a, c, eps=1e-8):
    """Elementwise a**c for a >= 0. Forward is exact (0**c == 0); the
    backward clamps the base at eps so silence bins do not produce inf."""
    if np.any(a.data < 0):
        raise AutogradError("power_compress requires non-negative input")
    c = float(c)
    out = Tensor(a.data**c)

    def backward(g):
        return (g * c * np.maximum(a.data, eps) ** (c - 1.0),)

    return _record(out, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(parts, axis):
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), backward)


def select(a, axis, index):
    """a[..., index, ...] along `axis` (one row removed)."""
    out = Tensor(np.take(a.data, index, axis=axis))

    def backward(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _record(out, (a,), backward)


def expand_rows(v, n):
    """(d,) -> (n, d) or (B, d) -> (B, n, d) by repetition."""
    if v.ndim == 1:
        out = Tensor(np.broadcast_to(v.data, (n, v.shape[0])).copy())
        return _record(out, (v,), lambda g: (g.sum(axis=0),))
    out = Tensor(np.broadcast_to(v.data[:, None, :], (v.shape[0], n, v.shape[1])).copy())
    return _record(out, (v,), lambda g: (g.sum(axis=1),))


def take(table, idx):
    """Gather along the last axis of a 2-D table: out[h, ...] = table[h, idx[...]]."""
    out = Tensor(table.data[:, idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        h = np.arange(table.shape[0]).reshape((-1,) + (1,) * idx.ndim)
        np.add.at(gt, (h, idx[None]), g)
        return (gt,)

    return _record(out, (table,), backward)


# ---------------------------------------------------------------------------
# neural-net primitives


def masked_softmax(scores, mask=None):
    """Softmax over the last axis. `mask` is a boolean array broadcastable to
    scores (True = attend). Masked positions come out exactly zero."""
    x = scores.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise AutogradError("masked_softmax: fully masked row")
        x = np.where(mask, x, _MASK_FILL)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (scores,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalisation over the last axis, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        d = x.shape[-1]
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(out, (x, gain, bias), backward)


def dropout(x, rate, rng, train):
    """Inverted dropout: train-time survivors scaled by 1/(1-rate); the
    inference path is the identity."""
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    s = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * s)
    return _record(out, (x,), lambda g: (g * keep * s,))
