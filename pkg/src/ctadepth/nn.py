"""Learnable building blocks: convolutions, cross-attention, ConvGRU, PPM.

All parameters live in a ParamStore (a flat name -> Tensor registry) so the
optimizer and checkpoint code can treat the whole model as one named-tensor
table. Forward passes are pure functions of parameters and inputs.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Flat registry of named learnable tensors with seeded initialization."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.params = {}

    def register(self, name, data, trainable=True):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=float), requires_grad=trainable)
        self.params[name] = t
        return t

    def uniform(self, name, shape, fan_in, zero=False):
        if zero:
            return self.register(name, np.zeros(shape))
        bound = 1.0 / math.sqrt(fan_in)
        return self.register(name, self.rng.uniform(-bound, bound, shape))

    def named(self):
        return dict(self.params)

    def trainable(self):
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def init_params(store, name, cout, cin, k=1, zero=False, bias=True):
    """Fan-in-scaled uniform conv parameters (weight [cout,cin,k,k] + bias)."""
    w = store.uniform(f"{name}.w", (cout, cin, k, k), cin * k * k, zero=zero)
    b = store.uniform(f"{name}.b", (cout,), cin * k * k, zero=True) if bias else None
    return w, b


class Conv:
    """2-D convolution layer bound to a ParamStore."""

    def __init__(self, store, name, cin, cout, k=3, stride=1, zero=False):
        self.w, self.b = init_params(store, name, cout, cin, k, zero=zero)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)


class Linear:
    def __init__(self, store, name, cin, cout, zero=False):
        self.w = store.uniform(f"{name}.w", (cout, cin), cin, zero=zero)
        self.b = store.uniform(f"{name}.b", (cout,), cin, zero=True)

    def __call__(self, x):
        return T.reshape(T.matmul(self.w, T.reshape(x, (x.data.shape[0], 1))),
                         (self.w.data.shape[0],)) + self.b


class AttentionBlock:
    """1x1-conv mapping functions for scaled-dot-product cross-attention."""

    def __init__(self, store, name, c_ctx, c_qk, c_v):
        self.theta = Conv(store, f"{name}.theta", c_ctx, c_qk, k=1)
        self.phi = Conv(store, f"{name}.phi", c_ctx, c_qk, k=1)
        self.sigma = Conv(store, f"{name}.sigma", c_v, c_v, k=1)
        self.c_qk = c_qk
        self.c_v = c_v


def cross_attention(block, ctx, tmp, embed=None):
    """Attend context-derived queries/keys over temporal values.

    Q and K come from 1x1 projections of ctx (plus the optional embedding),
    V from a projection of tmp; the output adds a residual tmp connection,
    so tmp must carry c_v channels.
    """
    if ctx.data.shape[1:] != tmp.data.shape[1:]:
        raise ValueError(f"cross_attention: spatial dims differ, "
                         f"{ctx.data.shape} vs {tmp.data.shape}")
    if tmp.data.shape[0] != block.c_v:
        raise ValueError(f"cross_attention: residual needs {block.c_v} channels, "
                         f"tmp has {tmp.data.shape[0]}")
    h, w = ctx.data.shape[1:]
    q = block.theta(ctx)
    k = block.phi(ctx)
    if embed is not None:
        q = T.add(q, embed)
        k = T.add(k, embed)
    v = block.sigma(tmp)

    def flat(t):
        return T.transpose(T.reshape(t, (t.data.shape[0], h * w)))

    scores = T.mul(T.matmul(flat(q), T.transpose(flat(k))), 1.0 / math.sqrt(block.c_qk))
    attn = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(attn, flat(v))), (block.c_v, h, w))
    return T.add(out, tmp)


class ConvGRUCell:
    """Convolutional GRU over [hidden, input] concatenation."""

    def __init__(self, store, name, c_h, c_x, k=3):
        self.wz = Conv(store, f"{name}.z", c_h + c_x, c_h, k=k)
        self.wr = Conv(store, f"{name}.r", c_h + c_x, c_h, k=k)
        self.wh = Conv(store, f"{name}.h", c_h + c_x, c_h, k=k)
        self.c_h = c_h


def conv_gru(cell, h, x):
    """One GRU step; keeps ||h||_inf <= 1 via tanh candidate + convex mix."""
    if h.data.shape[1:] != x.data.shape[1:]:
        raise ValueError(f"conv_gru: spatial dims differ, {h.data.shape} vs {x.data.shape}")
    hx = T.concat([h, x], axis=0)
    z = T.sigmoid(cell.wz(hx))
    r = T.sigmoid(cell.wr(hx))
    cand = T.tanh(cell.wh(T.concat([T.mul(r, h), x], axis=0)))
    return T.add(T.mul(T.sub(Tensor(1.0), z), h), T.mul(z, cand))


class PPMBlock:
    """Pyramid pooling: multi-bin pooled context fused back at full size."""

    def __init__(self, store, name, c_in, c_out, bins=(1, 2, 3, 6), c_branch=None):
        self.bins = tuple(bins)
        if c_branch is None:
            c_branch = max(c_in // len(self.bins), 1)
        self.reducers = [Conv(store, f"{name}.bin{b}", c_in, c_branch, k=1)
                         for b in self.bins]
        self.fuse = Conv(store, f"{name}.fuse", c_in + c_branch * len(self.bins), c_out, k=3)


def ppm(block, x):
    """Pool x to each bin size, reduce, resize back, concat, fuse."""
    h, w = x.data.shape[1:]
    if h < max(block.bins) or w < max(block.bins):
        raise ValueError(f"ppm: input {x.data.shape} smaller than largest bin {max(block.bins)}")
    branches = [x]
    for b, red in zip(block.bins, block.reducers):
        pooled = T.adaptive_avg_pool(x, (b, b))
        branches.append(T.resize_bilinear(red(pooled), (h, w)))
    return block.fuse(T.concat(branches, axis=0))


def rearrange_upscale(x, s):
    """Pixel-shuffle rearrangement lifting [C*s*s,h,w] to [C,s*h,s*w]."""
    return T.pixel_shuffle(x, s)


def rearrange_downscale(x, s):
    """Inverse of rearrange_upscale."""
    return T.pixel_unshuffle(x, s)


def _nn_gradcheck_cases(rng):
    from .gradcheck import gradcheck

    def attn_case():
        store = ParamStore(seed=int(rng.integers(1 << 31)))
        block = AttentionBlock(store, "attn", c_ctx=2, c_qk=3, c_v=3)
        ctx = Tensor(rng.standard_normal((2, 2, 2)), requires_grad=True)
        tmp = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
        emb = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
        probe = Tensor(rng.standard_normal((3, 2, 2)))
        params = list(store.trainable().values())

        def f(ctx, tmp, emb, *_):
            return T.tsum(T.mul(cross_attention(block, ctx, tmp, emb), probe))

        return gradcheck(f, [ctx, tmp, emb] + params, tol=1e-5)

    yield "cross_attention", attn_case

    def gru_case():
        store = ParamStore(seed=int(rng.integers(1 << 31)))
        cell = ConvGRUCell(store, "gru", c_h=2, c_x=2)
        h = Tensor(np.tanh(rng.standard_normal((2, 3, 3))), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
        probe = Tensor(rng.standard_normal((2, 3, 3)))
        params = list(store.trainable().values())

        def f(h, x, *_):
            return T.tsum(T.mul(conv_gru(cell, h, x), probe))

        return gradcheck(f, [h, x] + params, tol=1e-5)

    yield "conv_gru", gru_case

    def ppm_case():
        store = ParamStore(seed=int(rng.integers(1 << 31)))
        block = PPMBlock(store, "ppm", c_in=2, c_out=2, bins=(1, 2, 3))
        x = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)
        probe = Tensor(rng.standard_normal((2, 6, 6)))
        params = list(store.trainable().values())

        def f(x, *_):
            return T.tsum(T.mul(ppm(block, x), probe))

        return gradcheck(f, [x] + params, tol=1e-5)

    yield "ppm", ppm_case
