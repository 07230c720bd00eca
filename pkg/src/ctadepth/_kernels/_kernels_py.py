"""Pure-numpy implementations of the hot inner-loop kernels.

These are the fallback used when the compiled extension is unavailable.
Accumulation order in conv2d is (cin, kh, kw), matching both the compiled
kernels and a naive nested-loop reference, so results are bitwise identical
across backends at f64.
"""

import numpy as np

BACKEND = "python"


def conv2d_forward(x, w, stride, pad):
    """Cross-correlation of x[Cin,H,W] with w[Cout,Cin,kh,kw].

    Returns out[Cout,Ho,Wo] with Ho = (H + 2*pad - kh)//stride + 1.
    """
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {w.shape} larger than padded input {x.shape}")
    out = np.zeros((cout, ho, wo), dtype=x.dtype)
    # Shift-and-add: per output pixel this accumulates in (ci, ki, kj) order.
    for ci in range(cin):
        for ki in range(kh):
            for kj in range(kw):
                win = xp[ci, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride]
                out += w[:, ci, ki, kj, None, None] * win
    return out


def conv2d_backward(x, w, stride, pad, gout):
    """Gradients of conv2d_forward wrt x and w given gout[Cout,Ho,Wo]."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = gout.shape[1:]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gsum = gout.reshape(cout, -1)
    for ci in range(cin):
        for ki in range(kh):
            for kj in range(kw):
                win = xp[ci, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride]
                gw[:, ci, ki, kj] = gsum @ win.ravel()
                gxp[ci, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += np.einsum(
                    "o,ohw->hw", w[:, ci, ki, kj], gout
                )
    if pad:
        gx = gxp[:, pad:-pad, pad:-pad]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), gw


_EDGE_TOL = 1e-9


def _bilinear_setup(h, w, xs, ys):
    # the tolerance keeps exact-border samples (e.g. an identity warp) valid
    # in the presence of last-bit rounding in the coordinate math
    valid = ((xs >= -_EDGE_TOL) & (xs <= w - 1.0 + _EDGE_TOL)
             & (ys >= -_EDGE_TOL) & (ys <= h - 1.0 + _EDGE_TOL))
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp)
    if w == 1:
        x0 = np.zeros_like(x0)
    if h == 1:
        y0 = np.zeros_like(y0)
    fx = xc - x0
    fy = yc - y0
    return valid, x0, y0, fx, fy


def bilinear_forward(feat, xs, ys):
    """Sample feat[C,H,W] at continuous pixel coords (xs, ys), both length P.

    Returns (out[C,P], valid[P]). Out-of-bounds coordinates are clamped to
    the edge; valid marks samples whose interpolation cell is inside.
    """
    c, h, w = feat.shape
    valid, x0, y0, fx, fy = _bilinear_setup(h, w, xs, ys)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    f00 = feat[:, y0, x0]
    f01 = feat[:, y0, x1]
    f10 = feat[:, y1, x0]
    f11 = feat[:, y1, x1]
    out = (f00 * (1 - fx) * (1 - fy) + f01 * fx * (1 - fy)
           + f10 * (1 - fx) * fy + f11 * fx * fy)
    return out, valid


def bilinear_backward(feat, xs, ys, gout, valid):
    """Gradients of bilinear_forward wrt feat, xs and ys.

    Invalid samples contribute zero gradient to the coordinates (the clamped
    value gradient still flows into feat, matching the forward value).
    """
    c, h, w = feat.shape
    _, x0, y0, fx, fy = _bilinear_setup(h, w, xs, ys)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    gfeat = np.zeros_like(feat)
    for ci in range(c):
        np.add.at(gfeat[ci], (y0, x0), gout[ci] * (1 - fx) * (1 - fy))
        np.add.at(gfeat[ci], (y0, x1), gout[ci] * fx * (1 - fy))
        np.add.at(gfeat[ci], (y1, x0), gout[ci] * (1 - fx) * fy)
        np.add.at(gfeat[ci], (y1, x1), gout[ci] * fx * fy)
    f00 = feat[:, y0, x0]
    f01 = feat[:, y0, x1]
    f10 = feat[:, y1, x0]
    f11 = feat[:, y1, x1]
    dfx = (f01 - f00) * (1 - fy) + (f11 - f10) * fy
    dfy = (f10 - f00) * (1 - fx) + (f11 - f01) * fx
    gxs = np.where(valid, (gout * dfx).sum(axis=0), 0.0)
    gys = np.where(valid, (gout * dfy).sum(axis=0), 0.0)
    return gfeat, gxs, gys
