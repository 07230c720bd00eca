# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot-loop kernels: conv2d and bilinear sampling, forward/backward.

Accumulation order matches the pure-python fallback (and the naive loop
reference) exactly, so both backends produce bitwise-identical f64 results.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def conv2d_forward(cnp.ndarray[cnp.float64_t, ndim=3] x,
                   cnp.ndarray[cnp.float64_t, ndim=4] w,
                   int stride, int pad):
    cdef int cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if cin != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {(<object>x).shape} vs kernel {(<object>w).shape}")
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {(<object>w).shape} larger than padded input {(<object>x).shape}")
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((cout, ho, wo))
    cdef int o, i, j, ci, ki, kj, yi, xj
    cdef double acc
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for ki in range(kh):
                        yi = i * stride + ki - pad
                        if yi < 0 or yi >= h:
                            continue
                        for kj in range(kw):
                            xj = j * stride + kj - pad
                            if xj < 0 or xj >= wd:
                                continue
                            acc += w[o, ci, ki, kj] * x[ci, yi, xj]
                out[o, i, j] = acc
    return out


def conv2d_backward(cnp.ndarray[cnp.float64_t, ndim=3] x,
                    cnp.ndarray[cnp.float64_t, ndim=4] w,
                    int stride, int pad,
                    cnp.ndarray[cnp.float64_t, ndim=3] gout):
    cdef int cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = gout.shape[1], wo = gout.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] gx = np.zeros((cin, h, wd))
    cdef cnp.ndarray[cnp.float64_t, ndim=4] gw = np.zeros((cout, cin, kh, kw))
    cdef int o, i, j, ci, ki, kj, yi, xj
    cdef double g
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                g = gout[o, i, j]
                for ci in range(cin):
                    for ki in range(kh):
                        yi = i * stride + ki - pad
                        if yi < 0 or yi >= h:
                            continue
                        for kj in range(kw):
                            xj = j * stride + kj - pad
                            if xj < 0 or xj >= wd:
                                continue
                            gw[o, ci, ki, kj] += g * x[ci, yi, xj]
                            gx[ci, yi, xj] += g * w[o, ci, ki, kj]
    return gx, gw


def bilinear_forward(cnp.ndarray[cnp.float64_t, ndim=3] feat,
                     cnp.ndarray[cnp.float64_t, ndim=1] xs,
                     cnp.ndarray[cnp.float64_t, ndim=1] ys):
    cdef int c = feat.shape[0], h = feat.shape[1], w = feat.shape[2]
    cdef int p = xs.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((c, p))
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] valid = np.zeros(p, dtype=np.uint8)
    cdef int k, ci, x0, y0, x1, y1
    cdef double xc, yc, fx, fy
    for k in range(p):
        xc = xs[k]
        yc = ys[k]
        # tolerance keeps exact-border samples (identity warps) valid
        if (-1e-9 <= xc <= w - 1.0 + 1e-9) and (-1e-9 <= yc <= h - 1.0 + 1e-9):
            valid[k] = 1
        if xc < 0.0:
            xc = 0.0
        elif xc > w - 1.0:
            xc = w - 1.0
        if yc < 0.0:
            yc = 0.0
        elif yc > h - 1.0:
            yc = h - 1.0
        x0 = <int>xc
        if x0 > w - 2:
            x0 = w - 2
        if x0 < 0:
            x0 = 0
        y0 = <int>yc
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = xc - x0
        fy = yc - y0
        for ci in range(c):
            out[ci, k] = (feat[ci, y0, x0] * (1 - fx) * (1 - fy)
                          + feat[ci, y0, x1] * fx * (1 - fy)
                          + feat[ci, y1, x0] * (1 - fx) * fy
                          + feat[ci, y1, x1] * fx * fy)
    return out, valid.view(bool)


def bilinear_backward(cnp.ndarray[cnp.float64_t, ndim=3] feat,
                      cnp.ndarray[cnp.float64_t, ndim=1] xs,
                      cnp.ndarray[cnp.float64_t, ndim=1] ys,
                      cnp.ndarray[cnp.float64_t, ndim=2] gout,
                      cnp.ndarray valid):
    cdef int c = feat.shape[0], h = feat.shape[1], w = feat.shape[2]
    cdef int p = xs.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] gfeat = np.zeros((c, h, w))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gxs = np.zeros(p)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gys = np.zeros(p)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] vmask = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef int k, ci, x0, y0, x1, y1
    cdef double xc, yc, fx, fy, g, dfx, dfy, f00, f01, f10, f11
    for k in range(p):
        xc = xs[k]
        yc = ys[k]
        if xc < 0.0:
            xc = 0.0
        elif xc > w - 1.0:
            xc = w - 1.0
        if yc < 0.0:
            yc = 0.0
        elif yc > h - 1.0:
            yc = h - 1.0
        x0 = <int>xc
        if x0 > w - 2:
            x0 = w - 2
        if x0 < 0:
            x0 = 0
        y0 = <int>yc
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = xc - x0
        fy = yc - y0
        dfx = 0.0
        dfy = 0.0
        for ci in range(c):
            g = gout[ci, k]
            gfeat[ci, y0, x0] += g * (1 - fx) * (1 - fy)
            gfeat[ci, y0, x1] += g * fx * (1 - fy)
            gfeat[ci, y1, x0] += g * (1 - fx) * fy
            gfeat[ci, y1, x1] += g * fx * fy
            f00 = feat[ci, y0, x0]
            f01 = feat[ci, y0, x1]
            f10 = feat[ci, y1, x0]
            f11 = feat[ci, y1, x1]
            dfx += g * ((f01 - f00) * (1 - fy) + (f11 - f10) * fy)
            dfy += g * ((f10 - f00) * (1 - fx) + (f11 - f01) * fx)
        if vmask[k]:
            gxs[k] = dfx
            gys[k] = dfy
    return gfeat, gxs, gys
