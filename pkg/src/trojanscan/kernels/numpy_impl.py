"""Pure-numpy kernel backend: im2col + BLAS for conv, strided views for pooling."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, kh, kw):
    # (n, cin, h, w) -> (n*ho*wo, cin*kh*kw), rows in (n, i, j) order
    n, cin, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)


def conv2d_forward(x, w):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    y = _im2col(x, kh, kw) @ w.reshape(cout, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d_input_grad(g, w, x_shape):
    n, cin, h, wd = x_shape
    cout, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    gcols = (gm @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    gx = np.zeros(x_shape, dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            gx[:, :, p:p + ho, q:q + wo] += gcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return gx


def conv2d_weight_grad(g, x, w_shape):
    cout, cin, kh, kw = w_shape
    n, _, ho, wo = g.shape
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    return np.ascontiguousarray((gm.T @ _im2col(x, kh, kw)).reshape(w_shape))


def _pool_slots(x):
    # Crop odd trailing row/col, then expose the four 2x2 slot views in
    # row-major slot order: (0,0), (0,1), (1,0), (1,1).
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xc = x[:, :, : ho * 2, : wo * 2]
    return np.stack(
        [xc[:, :, 0::2, 0::2], xc[:, :, 0::2, 1::2], xc[:, :, 1::2, 0::2], xc[:, :, 1::2, 1::2]],
        axis=0,
    )


def maxpool2x2_forward(x):
    slots = _pool_slots(x)
    switches = np.argmax(slots, axis=0).astype(np.int8)  # first max wins
    pooled = np.take_along_axis(slots, switches[None].astype(np.intp), axis=0)[0]
    return np.ascontiguousarray(pooled), switches


def maxpool2x2_backward(g, switches, x_shape):
    gx = np.zeros(x_shape, dtype=g.dtype)
    n, c, h, w = x_shape
    ho, wo = h // 2, w // 2
    for k, (di, dj) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        view = gx[:, :, di : ho * 2 : 2, dj : wo * 2 : 2]
        mask = switches == k
        view[mask] = g[mask]
    return gx
