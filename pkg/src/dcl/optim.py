"""Adam with bias correction.

The update is a descent step; callers that maximize negate their objective
(both trainers here construct losses to minimize).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamState:
    """First/second moment accumulators and step counter for one tensor set."""

    __slots__ = ("m", "v", "step")

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.state = AdamState(self.params)

    def step(self, grads):
        """Apply one update from ``grads`` (a {param: Tensor/array} map)."""
        st = self.state
        st.step += 1
        c1 = 1.0 - self.beta1**st.step
        c2 = 1.0 - self.beta2**st.step
        for i, p in enumerate(self.params):
            g = grads[p]
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient for parameter {p.name or i!r}"
                )
            m = st.m[i]
            v = st.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
