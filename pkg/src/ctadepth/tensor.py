"""Dense tensors with reverse-mode automatic differentiation.

A dynamic tape is rebuilt on every forward pass: each operation that depends
on a grad-requiring input records its parents and a backward closure.
``backward()`` on a scalar walks the tape once in reverse topological order
and accumulates gradients into every reachable leaf.

Only scalar-tensor broadcasting is allowed; anything else must go through
``expand`` explicitly.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_dtype(dtype):
    """Select scalar precision for newly created tensors (f64 default)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _op(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(data, dtype=_DTYPE)
        out.grad = None
        out._done = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    def backward(self):
        """Populate leaf gradients from this scalar loss."""
        if self.data.size != 1:
            raise RuntimeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward already called on this tensor; rebuild the graph first")
        if not self.requires_grad:
            raise RuntimeError("loss is detached from any grad-requiring leaf")
        tape = Tape.from_output(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward_fn is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
        self._done = True


class Tape:
    """Topologically ordered record of the operations reachable from a loss."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar_like(x):
    return np.isscalar(x) or (isinstance(x, Tensor) and x.data.size == 1)


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape} "
                         "(only scalar broadcasting is supported)")


def _reduce_to(g, shape):
    # collapse a broadcast gradient back to a size-1 operand
    return np.asarray(g).sum().reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "add")

    def bwd(g):
        ga = _reduce_to(g, a.data.shape) if a.data.size == 1 and g.size != 1 else g
        gb = _reduce_to(g, b.data.shape) if b.data.size == 1 and g.size != 1 else g
        return ga, gb

    return Tensor._op(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "sub")

    def bwd(g):
        ga = _reduce_to(g, a.data.shape) if a.data.size == 1 and g.size != 1 else g
        gb = _reduce_to(-g, b.data.shape) if b.data.size == 1 and g.size != 1 else -g
        return ga, gb

    return Tensor._op(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g * bd
        gb = g * ad
        if a.data.size == 1 and ga.size != 1:
            ga = _reduce_to(ga, a.data.shape)
        if b.data.size == 1 and gb.size != 1:
            gb = _reduce_to(gb, b.data.shape)
        return ga, gb

    return Tensor._op(ad * bd, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        if a.data.size == 1 and ga.size != 1:
            ga = _reduce_to(ga, a.data.shape)
        if b.data.size == 1 and gb.size != 1:
            gb = _reduce_to(gb, b.data.shape)
        return ga, gb

    return Tensor._op(ad / bd, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    return Tensor._op(-a.data, (a,), lambda g: (-g,))


def _unary(a, fd, fb):
    a = as_tensor(a)
    out = fd(a.data)
    return Tensor._op(out, (a,), lambda g: (fb(g, a.data, out),))


def exp(a):
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a):
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, y: g * 0.5 / y)


def sin(a):
    return _unary(a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda g, x, y: -g * np.sin(x))


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid, lambda g, x, y: g * y * (1.0 - y))


def softplus(a):
    return _unary(a, lambda x: np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))),
                  lambda g, x, y: g * _sigmoid(x))


def absolute(a):
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def square(a):
    return _unary(a, np.square, lambda g, x, y: g * 2.0 * x)


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._op(out, (a,), lambda g: (g * mask,))


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._op(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.size // out.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return Tensor._op(out, (a,), bwd)


def l1_norm(a):
    """Sum of absolute values (full reduction)."""
    return tsum(absolute(a))


def l2_norm(a, axis=0):
    """Euclidean norm along one axis; subgradient 0 where the norm is 0."""
    a = as_tensor(a)
    out = np.sqrt(np.square(a.data).sum(axis=axis))

    def bwd(g):
        safe = np.where(out == 0.0, 1.0, out)
        scale = np.expand_dims(g / safe, axis)
        return (scale * a.data,)

    return Tensor._op(out, (a,), bwd)


def softmax(a, axis=-1):
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise FloatingPointError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._op(out, (a,), bwd)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    src = a.data.shape
    return Tensor._op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return Tensor._op(a.data.transpose(axes), (a,),
                      lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of empty list")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def expand(a, shape):
    """Broadcast size-1 axes of a to the given shape (gradient sums back)."""
    a = as_tensor(a)
    src = a.data.shape
    if len(src) != len(shape) or any(s != d and s != 1 for s, d in zip(src, shape)):
        raise ValueError(f"expand: cannot expand {src} to {tuple(shape)}")
    axes = tuple(i for i, (s, d) in enumerate(zip(src, shape)) if s == 1 and d != 1)

    def bwd(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return Tensor._op(np.broadcast_to(a.data, shape), (a,), bwd)


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    items = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in items)

    def bwd(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += np.asarray(g).reshape(np.shape(out))
        return (full,)

    return Tensor._op(out, (a,), bwd)


Tensor.__getitem__ = getitem


def stack(tensors, axis=0):
    return concat([reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:])
                   for t in tensors], axis=axis)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return Tensor._op(ad @ bd, (a, b), bwd)


# -- spatial ops -----------------------------------------------------------

def _k64(a):
    # compiled kernels are f64-typed; round-trip through f64 when running f32
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d(x, w, b=None, stride=1, padding="same"):
    """Cross-correlation of x[Cin,H,W] with w[Cout,Cin,kh,kw] plus bias."""
    x, w = as_tensor(x), as_tensor(w)
    kh, kw = w.data.shape[2], w.data.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d requires odd kernels, got {kh}x{kw}")
    pad = kh // 2 if padding == "same" else int(padding)
    out = _kernels.conv2d_forward(_k64(x.data), _k64(w.data), stride, pad)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]

        def bwd(g):
            g = np.ascontiguousarray(g)
            gx, gw = _kernels.conv2d_backward(_k64(x.data), _k64(w.data), stride, pad, _k64(g))
            return gx, gw, g.sum(axis=(1, 2))

        return Tensor._op(out, (x, w, b), bwd)

    def bwd(g):
        gx, gw = _kernels.conv2d_backward(_k64(x.data), _k64(w.data), stride, pad, _k64(g))
        return gx, gw

    return Tensor._op(out, (x, w), bwd)


def bilinear_sample(feat, coords):
    """Sample feat[C,H,W] at coords[2,H',W'] (x row first, pixel units).

    Returns (Tensor[C,H',W'], valid mask array [H',W']). Gradients flow to
    both feat and coords; invalid samples send zero gradient to coords.
    """
    feat, coords = as_tensor(feat), as_tensor(coords)
    if coords.data.shape[0] != 2:
        raise ValueError(f"coords must have leading dim 2, got {coords.data.shape}")
    hw = coords.data.shape[1:]
    xs = _k64(coords.data[0].ravel())
    ys = _k64(coords.data[1].ravel())
    flat, valid = _kernels.bilinear_forward(_k64(feat.data), xs, ys)
    c = feat.data.shape[0]

    def bwd(g):
        gflat = g.reshape(c, -1)
        gfeat, gxs, gys = _kernels.bilinear_backward(_k64(feat.data), xs, ys, _k64(gflat), valid)
        return gfeat, np.stack([gxs.reshape(hw), gys.reshape(hw)])

    out = Tensor._op(flat.reshape((c,) + hw), (feat, coords), bwd)
    return out, valid.reshape(hw)


def adaptive_avg_pool(x, bins):
    """Average-pool x[C,H,W] to C x bh x bw with near-equal rectangular bins."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    bh, bw = bins
    if bh > h or bw > w:
        raise ValueError(f"pool bins {bins} exceed input {x.data.shape}")
    ys = [(i * h // bh, -(-((i + 1) * h) // bh)) for i in range(bh)]
    xsb = [(j * w // bw, -(-((j + 1) * w) // bw)) for j in range(bw)]
    out = np.empty((c, bh, bw), dtype=x.data.dtype)
    for i, (y0, y1) in enumerate(ys):
        for j, (x0, x1) in enumerate(xsb):
            out[:, i, j] = x.data[:, y0:y1, x0:x1].mean(axis=(1, 2))

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i, (y0, y1) in enumerate(ys):
            for j, (x0, x1) in enumerate(xsb):
                n = (y1 - y0) * (x1 - x0)
                gx[:, y0:y1, x0:x1] += g[:, i, j, None, None] / n
        return (gx,)

    return Tensor._op(out, (x,), bwd)


def global_avg_pool(x):
    """x[C,H,W] -> Tensor[C]."""
    return reshape(tmean(x, axis=(1, 2)), (x.data.shape[0],))


def _resize_grid(h, w, h2, w2):
    sy, sx = h / h2, w / w2
    ys = (np.arange(h2) + 0.5) * sy - 0.5
    xs = (np.arange(w2) + 0.5) * sx - 0.5
    return np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)


def resize_bilinear(x, size):
    x = as_tensor(x)
    c, h, w = x.data.shape
    h2, w2 = size
    ys, xs = _resize_grid(h, w, h2, w2)
    gx, gy = np.meshgrid(xs, ys)
    xs_f = _k64(gx.ravel())
    ys_f = _k64(gy.ravel())
    flat, valid = _kernels.bilinear_forward(_k64(x.data), xs_f, ys_f)

    def bwd(g):
        gflat = g.reshape(c, -1)
        gfeat, _, _ = _kernels.bilinear_backward(_k64(x.data), xs_f, ys_f, _k64(gflat), valid)
        return (gfeat,)

    return Tensor._op(flat.reshape(c, h2, w2), (x,), bwd)


def resize_nearest(x, size):
    x = as_tensor(x)
    c, h, w = x.data.shape
    h2, w2 = size
    ys, xs = _resize_grid(h, w, h2, w2)
    yi = np.round(ys).astype(np.intp)
    xi = np.round(xs).astype(np.intp)
    out = x.data[:, yi[:, None], xi[None, :]]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), yi[:, None], xi[None, :]), g)
        return (gx,)

    return Tensor._op(out, (x,), bwd)


def pixel_shuffle(x, s):
    """Rearrange x[C*s*s,h,w] to [C, s*h, s*w]; bijective."""
    x = as_tensor(x)
    cs, h, w = x.data.shape
    if cs % (s * s) != 0:
        raise ValueError(f"pixel_shuffle: {cs} channels not divisible by {s}**2")
    c = cs // (s * s)
    out = (x.data.reshape(c, s, s, h, w)
           .transpose(0, 3, 1, 4, 2)
           .reshape(c, h * s, w * s))

    def bwd(g):
        return (np.ascontiguousarray(
            g.reshape(c, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(cs, h, w)),)

    return Tensor._op(out, (x,), bwd)


def pixel_unshuffle(x, s):
    """Inverse of pixel_shuffle."""
    x = as_tensor(x)
    c, hs, ws = x.data.shape
    if hs % s or ws % s:
        raise ValueError(f"pixel_unshuffle: spatial dims {x.data.shape} not divisible by {s}")
    h, w = hs // s, ws // s
    out = (x.data.reshape(c, h, s, w, s)
           .transpose(0, 2, 4, 1, 3)
           .reshape(c * s * s, h, w))

    def bwd(g):
        return (np.ascontiguousarray(
            g.reshape(c, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(c, hs, ws)),)

    return Tensor._op(out, (x,), bwd)


# operator sugar

Tensor.__add__ = add
Tensor.__radd__ = lambda a, b: add(b, a)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda a, b: sub(b, a)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda a, b: mul(b, a)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda a, b: div(b, a)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = reshape
