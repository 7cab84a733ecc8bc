"""Numba kernel backend: direct convolution loops JIT-compiled per dtype.

The inner loops run over the channel axis of channels-last scratch copies so
the compiler emits contiguous vector FMAs; NCHW in/out layout is preserved at
the boundary. The input-gradient kernel has two loop orders and picks per
call based on which channel axis is wide enough to vectorize over.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _fwd(x, w):
    # x (n,h,w,cin), w (kh,kw,cin,cout) -> (n,ho,wo,cout)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    y = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for im in range(n):
        for i in range(ho):
            for j in range(wo):
                acc = y[im, i, j]
                for p in range(kh):
                    for q in range(kw):
                        xr = x[im, i + p, j + q]
                        for ci in range(cin):
                            xv = xr[ci]
                            wr = w[p, q, ci]
                            for co in range(cout):
                                acc[co] += xv * wr[co]
    return y


@njit(cache=True)
def _bwd_input_by_cin(g, w, h, wd):
    # g (n,ho,wo,cout), w (kh,kw,cout,cin) -> gx (n,h,wd,cin); FMA over cin
    n, ho, wo, cout = g.shape
    kh, kw, _, cin = w.shape
    gx = np.zeros((n, h, wd, cin), dtype=g.dtype)
    for im in range(n):
        for i in range(ho):
            for j in range(wo):
                gr = g[im, i, j]
                for p in range(kh):
                    for q in range(kw):
                        gxr = gx[im, i + p, j + q]
                        for co in range(cout):
                            gv = gr[co]
                            wr = w[p, q, co]
                            for ci in range(cin):
                                gxr[ci] += gv * wr[ci]
    return gx


@njit(cache=True)
def _bwd_input_by_cout(g, w, h, wd):
    # g (n,ho,wo,cout), w (kh,kw,cin,cout) -> gx (n,h,wd,cin); dot over cout
    n, ho, wo, cout = g.shape
    kh, kw, cin, _ = w.shape
    gx = np.zeros((n, h, wd, cin), dtype=g.dtype)
    for im in range(n):
        for i in range(ho):
            for j in range(wo):
                gr = g[im, i, j]
                for p in range(kh):
                    for q in range(kw):
                        gxr = gx[im, i + p, j + q]
                        for ci in range(cin):
                            wr = w[p, q, ci]
                            s = g.dtype.type(0.0)
                            for co in range(cout):
                                s += wr[co] * gr[co]
                            gxr[ci] += s
    return gx


@njit(cache=True)
def _bwd_weight(g, x, kh, kw):
    # g (n,ho,wo,cout), x (n,h,wd,cin) -> gw (kh,kw,cin,cout); FMA over cout
    n, ho, wo, cout = g.shape
    cin = x.shape[3]
    gw = np.zeros((kh, kw, cin, cout), dtype=g.dtype)
    for im in range(n):
        for i in range(ho):
            for j in range(wo):
                gr = g[im, i, j]
                for p in range(kh):
                    for q in range(kw):
                        xr = x[im, i + p, j + q]
                        for ci in range(cin):
                            xv = xr[ci]
                            gwr = gw[p, q, ci]
                            for co in range(cout):
                                gwr[co] += xv * gr[co]
    return gw


@njit(cache=True)
def _pool_fwd(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    y = np.empty((n, c, ho, wo), dtype=x.dtype)
    switches = np.empty((n, c, ho, wo), dtype=np.int8)
    for im in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[im, ch, 2 * i, 2 * j]
                    arg = 0
                    k = 0
                    for di in range(2):
                        for dj in range(2):
                            v = x[im, ch, 2 * i + di, 2 * j + dj]
                            if v > best:  # strict: first max wins
                                best = v
                                arg = k
                            k += 1
                    y[im, ch, i, j] = best
                    switches[im, ch, i, j] = arg
    return y, switches


@njit(cache=True)
def _pool_bwd(g, switches, h, w):
    n, c, ho, wo = g.shape
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    for im in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    k = switches[im, ch, i, j]
                    gx[im, ch, 2 * i + k // 2, 2 * j + k % 2] = g[im, ch, i, j]
    return gx


def _nhwc(a):
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _nchw(a):
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def conv2d_forward(x, w):
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (kh,kw,cin,cout)
    return _nchw(_fwd(_nhwc(x), wt))


def conv2d_input_grad(g, w, x_shape):
    _, cin, h, wd = x_shape
    gt = _nhwc(g)
    if cin >= 16:
        wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # (kh,kw,cout,cin)
        gx = _bwd_input_by_cin(gt, wt, h, wd)
    else:
        wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (kh,kw,cin,cout)
        gx = _bwd_input_by_cout(gt, wt, h, wd)
    return _nchw(gx)


def conv2d_weight_grad(g, x, w_shape):
    cout, cin, kh, kw = w_shape
    gw = _bwd_weight(_nhwc(g), _nhwc(x), kh, kw)
    return np.ascontiguousarray(gw.transpose(3, 2, 0, 1))


def maxpool2x2_forward(x):
    return _pool_fwd(x)


def maxpool2x2_backward(g, switches, x_shape):
    return _pool_bwd(g, switches, x_shape[2], x_shape[3])
