"""Bias-corrected Adam over named parameter tensors."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Standard Adam (first/second moment estimates with bias correction)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, params):
        """Apply one update to every tensor in ``params`` (name -> Tensor).

        Reads ``.grad`` and updates ``.data`` in place; the shared step
        counter increments once per call.
        """
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1 ** st.step
        bc2 = 1.0 - self.beta2 ** st.step
        for name, p in params.items():
            if not isinstance(p, Tensor) or p.grad is None:
                raise ShapeError(f"adam: parameter {name!r} has no gradient")
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
            if name not in st.m:
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            elif st.m[name].shape != p.data.shape:
                raise ShapeError(f"adam: state shape {st.m[name].shape} != parameter shape {p.data.shape} for {name!r}")
            m = st.m[name]
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
