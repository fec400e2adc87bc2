"""A small reverse-mode automatic differentiation library over numpy arrays.

Only the operations needed by the GIFT network are provided.  Every binary
operation broadcasts like numpy, and gradients are summed back to the shape
of each input, so any parameter may carry an extra leading batch axis (used
for batched finite-difference checks and per-sample modulated weights).

Graph nodes are only recorded when at least one input requires a gradient;
pure evaluation therefore costs no more than the underlying numpy calls.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    """Absolute value; the subgradient at zero is taken as zero."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, slope * a.data), (a,), lambda g: (np.where(pos, g, slope * g),))


def elu(a):
    a = as_tensor(a)
    pos = a.data > 0
    neg_part = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * (neg_part + 1.0)),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b):
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    zero = np.zeros((), dtype=np.float64)
    return _make(np.where(c, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(np.where(c, g, zero), a.shape),
                            unbroadcast(np.where(c, zero, g), b.shape)))


# -- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    ts = [as_tensor(t) for t in tensors]
    nb = max(t.ndim for t in ts)
    lead = np.broadcast_shapes(*[t.shape[:1] for t in ts]) if nb else ()
    datas = [np.broadcast_to(t.data, lead + t.shape[1:]) for t in ts]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(unbroadcast(p, t.shape) for p, t in zip(np.split(g, bounds, axis=axis), ts))

    return _make(out, tuple(ts), back)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back)


def softmax(a, axis=-1):
    """Softmax with max subtraction for numerical stability."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


# -- image ops (N, C, H, W) -------------------------------------------------

def avg_pool2(a):
    a = as_tensor(a)
    n, c, h, w = a.shape
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (a,), back)


def upsample2(a):
    """Nearest-neighbour 2x upsampling."""
    a = as_tensor(a)
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def back(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), back)


def _pad(x, p, mode):
    if p == 0:
        return x
    if mode == "circular":
        width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
        return np.pad(x, width, mode="wrap")
    out = np.zeros(x.shape[:-2] + (x.shape[-2] + 2 * p, x.shape[-1] + 2 * p))
    out[..., p:-p, p:-p] = x
    return out


def _fold_circular(gpad, p, h, wd):
    rows = np.zeros(gpad.shape[:2] + (h, wd + 2 * p))
    for r, src in enumerate((np.arange(h + 2 * p) - p) % h):
        rows[:, :, src] += gpad[:, :, r]
    out = np.zeros(gpad.shape[:2] + (h, wd))
    for c, src in enumerate((np.arange(wd + 2 * p) - p) % wd):
        out[:, :, :, src] += rows[:, :, :, c]
    return out


def conv2d(x, w, padding="zeros"):
    """Stride-1 'same' convolution (cross-correlation).

    ``x`` is (B, M, H, W).  ``w`` is (N, M, k, k) shared by the batch, or
    (Bw, N, M, k, k) with one kernel per batch element; batch axes broadcast.
    ``padding`` is ``"zeros"`` or ``"circular"``.
    """
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[-1]
    if k % 2 != 1 or w.shape[-2] != k:
        raise ValueError(f"kernel must be square with odd size, got {w.shape[-2:]}")
    b, m, h, wd = x.shape
    n = w.shape[-4]
    if w.shape[-3] != m:
        raise ValueError(f"kernel expects {w.shape[-3]} input channels, input has {m}")
    p = k // 2
    cols = sliding_window_view(_pad(x.data, p, padding), (k, k), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * wd, m * k * k)
    wb = w.data if w.ndim == 5 else w.data[None]
    wmat = wb.reshape(wb.shape[0], n, m * k * k).transpose(0, 2, 1)
    if wb.shape[0] == 1:
        out = (cols.reshape(b * h * wd, m * k * k) @ wmat[0]).reshape(b, h * wd, n)
    else:
        out = cols @ wmat
    bo = out.shape[0]
    out = out.transpose(0, 2, 1).reshape(bo, n, h, wd)

    def back(g):
        g2 = g.reshape(bo, n, h * wd).transpose(0, 2, 1)
        if wb.shape[0] == 1 and b == bo:
            gw = (cols.reshape(b * h * wd, -1).T @ g2.reshape(b * h * wd, n))[None]
        else:
            gw = unbroadcast(np.swapaxes(cols, 1, 2) @ g2, wmat.shape)
        gw = gw.transpose(0, 2, 1).reshape(wb.shape)
        if w.ndim == 4:
            gw = gw[0]
        gx = None
        if x.requires_grad:
            if wb.shape[0] == 1:
                gcols = (g2.reshape(bo * h * wd, n) @ wmat[0].T).reshape(bo, h * wd, -1)
            else:
                gcols = g2 @ np.swapaxes(wmat, 1, 2)
            gcols = unbroadcast(gcols, (b, h * wd, m * k * k))
            gcols = gcols.reshape(b, h, wd, m, k, k)
            gpad = np.zeros((b, m, h + 2 * p, wd + 2 * p))
            for i in range(k):
                for j in range(k):
                    gpad[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if p == 0:
                gx = gpad
            elif padding == "circular":
                gx = _fold_circular(gpad, p, h, wd)
            else:
                gx = gpad[:, :, p:p + h, p:p + wd]
        return gx, gw

    return _make(out, (x, w), back)
