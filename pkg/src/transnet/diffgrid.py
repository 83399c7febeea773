"""Minimal reverse-mode differentiation over dense float64 grids.

Only the handful of operations the planner and filter need are provided.
Arrays are laid out as ``(..., H, W, C)``: any leading axes are batch axes.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DTensor",
    "Tape",
    "ShapeError",
    "tensor",
    "conv2d",
    "channel_max",
    "softmax",
    "one_hot",
    "add",
    "mul",
    "sum_axis",
    "reshape",
    "relu",
    "normalize",
    "cell_kernels",
    "head",
    "put_rows",
    "local_conv",
    "cross_entropy",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


_counter = itertools.count()


class _Node:
    __slots__ = ("seq", "inputs", "backward")

    def __init__(self, inputs, backward):
        self.seq = next(_counter)
        self.inputs = inputs
        self.backward = backward


class DTensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data, dtype=np.float64)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def tensor(data, requires_grad=False) -> DTensor:
    return DTensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(x)


def _make(data, inputs, backward) -> DTensor:
    """Wrap an op result, recording it only when some input needs a gradient."""
    out = DTensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward)
    return out


class Tape:
    """Operations reachable from a loss, in execution order.

    The tape is recovered from the graph itself, so tensors that are never
    used in a loss cost nothing once they go out of scope.
    """

    def __init__(self, loss: DTensor):
        seen = set()
        nodes = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._node.inputs)
        nodes.sort(key=lambda t: t._node.seq)
        self.entries: list[DTensor] = nodes

    def __len__(self):
        return len(self.entries)

    def backward(self, loss: DTensor):
        adj = {id(loss): np.ones_like(loss.data)}
        for out in reversed(self.entries):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            grads = out._node.backward(g)
            for inp, gi in zip(out._node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += gi
                elif id(inp) in adj:
                    adj[id(inp)] = adj[id(inp)] + gi
                else:
                    adj[id(inp)] = gi
        if loss._node is None and loss.requires_grad:
            loss.grad += 1.0


def backward(loss: DTensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape(loss).backward(loss)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> DTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> DTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum_axis(x, axis=None, keepdims=False) -> DTensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def reshape(x, shape) -> DTensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def head(x, n: int) -> DTensor:
    """First ``n`` entries along the leading (batch) axis."""
    x = _as_tensor(x)
    if n == x.shape[0]:
        return x

    def bw(g):
        gx = np.zeros(x.shape)
        gx[:n] = g
        return (gx,)

    return _make(x.data[:n], (x,), bw)


def put_rows(base, rows, values) -> DTensor:
    """Copy of ``base`` with leading-axis entries ``rows`` replaced by ``values``."""
    base, values = _as_tensor(base), _as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    if len(np.unique(rows)) != len(rows):
        raise ValueError("put_rows needs distinct rows")
    if values.shape != (len(rows),) + base.shape[1:]:
        raise ShapeError(f"values shape {values.shape} does not fit rows of {base.shape}")
    out = base.data.copy()
    out[rows] = values.data

    def bw(g):
        gb = g.copy()
        gb[rows] = 0.0
        return gb, g[rows]

    return _make(out, (base, values), bw)


def relu(x) -> DTensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _check_conv_shapes(x, kernel):
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"kernel must be k x k x Cin x Cout, got {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise ShapeError(f"kernel width must be odd, got {kernel.shape[0]}")
    if x.ndim < 3:
        raise ShapeError(f"conv2d input must be (..., H, W, Cin), got {x.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(
            f"input has {x.shape[-1]} channels but kernel expects {kernel.shape[2]}"
        )


def conv2d(x, kernel) -> DTensor:
    """Same-size 2-D cross-correlation with zero padding.

    ``out[..., y, x, o] = sum_{i, j, c} in[..., y+i-p, x+j-p, c] * kernel[i, j, c, o]``
    with ``p = (k - 1) // 2`` and out-of-range input read as 0.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_conv_shapes(x, kernel)
    k, _, cin, cout = kernel.shape
    p = (k - 1) // 2
    H, W = x.shape[-3], x.shape[-2]
    lead = x.shape[:-3]
    pad = [(0, 0)] * len(lead) + [(p, p), (p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    # (..., H, W, Cin, k, k) -> (..., H, W, k, k, Cin)
    win = sliding_window_view(xp, (k, k), axis=(-3, -2))
    cols = np.moveaxis(win, -3, -1).reshape(-1, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(lead + (H, W, cout))

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(lead + (H, W, k, k, cin))
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[..., i : i + H, j : j + W, :] += gcols[..., i, j, :]
            gx = gxp[..., p : p + H, p : p + W, :]
        return gx, gk

    return _make(out, (x, kernel), bw)


def cell_kernels(kernel, channels) -> DTensor:
    """Gather one kernel column per cell: the fused form of convolve-then-select.

    ``kernel`` is (k, k, 1, N); ``channels`` is an int array (..., H, W, m) of
    column indices. The result is (..., H, W, k*k, m) with
    ``out[..., j, i] = kernel.reshape(k*k, N)[j, channels[..., i]]``.
    """
    kernel = _as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != 1:
        raise ShapeError(f"cell_kernels needs a (k, k, 1, N) kernel, got {kernel.shape}")
    k, _, _, n = kernel.shape
    idx = np.asarray(channels)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"channel index out of range [0, {n})")
    flat = kernel.data.reshape(k * k, n)
    out = np.moveaxis(flat[:, idx], 0, -2)

    def bw(g):
        g = np.moveaxis(g, -2, 0).reshape(k * k, -1)
        cols = idx.ravel()
        gk = np.stack([np.bincount(cols, weights=g[j], minlength=n) for j in range(k * k)])
        return (gk.reshape(kernel.shape),)

    return _make(out, (kernel,), bw)


def local_conv(x, weights) -> DTensor:
    """Zero-padded correlation with a different kernel at every cell.

    ``x`` is (..., H, W, 1) and ``weights`` (..., H, W, k*k, m); the output is
    (..., H, W, m). With ``weights`` from :func:`cell_kernels` this equals
    ``conv2d`` followed by picking each cell's channels.
    """
    x, weights = _as_tensor(x), _as_tensor(weights)
    if x.ndim < 3 or x.shape[-1] != 1:
        raise ShapeError(f"local_conv input must be (..., H, W, 1), got {x.shape}")
    kk = weights.shape[-2]
    k = int(round(np.sqrt(kk)))
    if k * k != kk or k % 2 == 0:
        raise ShapeError(f"weights must hold an odd square kernel, got {kk} taps")
    H, W = x.shape[-3], x.shape[-2]
    p = (k - 1) // 2
    lead = x.shape[:-3]
    if weights.shape[:-2] != lead + (H, W):
        raise ShapeError(f"weights {weights.shape} do not match input {x.shape}")
    xp = np.pad(x.data[..., 0], [(0, 0)] * len(lead) + [(p, p), (p, p)])
    patches = sliding_window_view(xp, (k, k), axis=(-2, -1)).reshape(lead + (H, W, kk))
    out = np.einsum("...j,...jm->...m", patches, weights.data)

    def bw(g):
        gw = patches[..., :, None] * g[..., None, :] if weights.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = np.einsum("...jm,...m->...j", weights.data, g).reshape(lead + (H, W, k, k))
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[..., i : i + H, j : j + W] += gp[..., i, j]
            gx = gxp[..., p : p + H, p : p + W, None]
        return gx, gw

    return _make(out, (x, weights), bw)


def channel_max(x) -> DTensor:
    """Max over the last axis, keeping it with extent 1. Ties go to the lowest index."""
    x = _as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"channel_max needs a channel axis, got {x.shape}")
    idx = np.argmax(x.data, axis=-1)[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)

    def bw(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g, axis=-1)
        return (gx,)

    return _make(out, (x,), bw)


def softmax(x, axis=-1) -> DTensor:
    x = _as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (x,), bw)


def one_hot(indices, depth: int) -> DTensor:
    """Constant indicator tensor with a trailing axis of size ``depth``."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("one_hot needs integer indices")
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        raise ValueError(f"index out of range for depth {depth}")
    return DTensor((idx[..., None] == np.arange(depth)).astype(np.float64))


def normalize(x, axis=None):
    """Scale ``x`` to sum to one over ``axis`` (default: every axis).

    Slices whose total mass is not positive are replaced by the uniform
    distribution; the returned boolean array flags those slices.
    """
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    s = x.data.sum(axis=axes, keepdims=True)
    reset = ~(s > 0)
    n = int(np.prod([x.shape[a] for a in axes]))
    safe = np.where(reset, 1.0, s)
    y = np.where(reset, 1.0 / n, x.data / safe)

    def bw(g):
        gx = (g - (g * y).sum(axis=axes, keepdims=True)) / safe
        return (np.where(reset, 0.0, gx),)

    return _make(y, (x,), bw), reset.reshape(np.delete(s.shape, axes).tolist() or ())


def cross_entropy(logits, target) -> DTensor:
    """``-log softmax(logits)[target]`` along the last axis.

    ``target`` is an int for 1-d logits, or an int array matching the leading
    axes; the result has the leading shape.
    """
    logits = _as_tensor(logits)
    n = logits.shape[-1]
    tgt = np.asarray(target)
    if not np.issubdtype(tgt.dtype, np.integer):
        raise ValueError("target must be an integer action index")
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {tgt.shape} does not match logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n):
        raise ValueError(f"target out of range [0, {n})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, tgt[..., None], np.take_along_axis(p, tgt[..., None], -1) - 1.0, -1)
        return (p * np.asarray(g)[..., None],)

    return _make(out, (logits,), bw)


def grad_check(f: Callable, x, eps: float = 1e-5, max_checks: Optional[int] = None, seed=0) -> float:
    """Worst relative error between backprop and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f`` maps them to a scalar.
    ``max_checks`` limits each tensor to that many randomly chosen entries.
    """
    xs: Sequence[DTensor] = [x] if isinstance(x, DTensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    call = (lambda: f(xs[0])) if isinstance(x, DTensor) else (lambda: f(*xs))
    backward(call())
    analytic = [t.grad.copy() for t in xs]
    worst = 0.0
    rng = np.random.default_rng(seed)
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        idx = range(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, max_checks, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = call().item()
            flat[i] = orig - eps
            fm = call().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
