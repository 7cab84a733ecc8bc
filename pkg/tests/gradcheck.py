"""Central finite-difference gradient oracle used by the autodiff tests."""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued ``f()`` w.r.t. array ``x``.

    ``f`` must recompute from the current contents of ``x`` on every call.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric):
    """Elementwise |a - n| / max(|a|, |n|, 1), maximised.

    The unit floor is the usual gradcheck convention: strictly relative for
    gradients of order one and above, absolute below it, so the h^2
    truncation floor of the central difference cannot blow up the ratio on
    near-zero entries.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    err = np.abs(a - n) / denom
    return float(err.max()) if err.size else 0.0
