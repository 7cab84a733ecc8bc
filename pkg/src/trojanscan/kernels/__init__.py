"""Hot numeric kernels (conv2d, 2x2 maxpool) with two interchangeable backends.

The numba backend JIT-compiles direct-convolution loops; the numpy backend
uses im2col plus BLAS matmuls. Both produce the same values up to float
accumulation order. Selection:

  * env var ``TROJANSCAN_BACKEND`` = ``numba`` | ``numpy`` | ``auto`` (default)
  * ``set_backend()`` at runtime (used by tests and the benchmark)

``auto`` picks numba when it imports, else falls back to numpy.
"""

import os

from ..errors import ConfigError
from . import numpy_impl

try:
    from . import numba_impl

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None
    _HAVE_NUMBA = False

_IMPLS = {"numpy": numpy_impl}
if _HAVE_NUMBA:
    _IMPLS["numba"] = numba_impl

_active_name = None
_active = None


def available_backends():
    return sorted(_IMPLS)


def set_backend(name):
    """Select the kernel backend; returns the previously active name."""
    global _active_name, _active
    if name == "auto":
        name = "numba" if _HAVE_NUMBA else "numpy"
    if name not in _IMPLS:
        raise ConfigError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    prev = _active_name
    _active_name = name
    _active = _IMPLS[name]
    return prev


def active_backend():
    return _active_name


set_backend(os.environ.get("TROJANSCAN_BACKEND", "auto").lower())


def conv2d_forward(x, w):
    return _active.conv2d_forward(x, w)


def conv2d_input_grad(g, w, x_shape):
    return _active.conv2d_input_grad(g, w, x_shape)


def conv2d_weight_grad(g, x, w_shape):
    return _active.conv2d_weight_grad(g, x, w_shape)


def maxpool2x2_forward(x):
    """Returns (pooled, switches); switches hold the 2x2 slot index (0..3)."""
    return _active.maxpool2x2_forward(x)


def maxpool2x2_backward(g, switches, x_shape):
    return _active.maxpool2x2_backward(g, switches, x_shape)


def warmup(dtype=None):
    """Run every kernel once on tiny inputs to trigger JIT compilation."""
    import numpy as np

    for dt in ([dtype] if dtype is not None else [np.float32, np.float64]):
        x = np.arange(2 * 3 * 6 * 6, dtype=dt).reshape(2, 3, 6, 6) / 100.0
        w = np.arange(4 * 3 * 3 * 3, dtype=dt).reshape(4, 3, 3, 3) / 100.0
        y = conv2d_forward(x, w)
        conv2d_input_grad(y, w, x.shape)
        conv2d_weight_grad(y, x, w.shape)
        p, s = maxpool2x2_forward(x)
        maxpool2x2_backward(p, s, x.shape)
