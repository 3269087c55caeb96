"""Adam with bias correction, operating on aligned parameter/gradient lists."""

from __future__ import annotations

import numpy as np

from ..errors import DataError


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def _ensure_state(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params):
            raise DataError(f"optimizer tracks {len(self.m)} tensors, got {len(params)}")

    def step(self, params, grads):
        """One update: m, v moment tracking, bias-corrected step, in place."""
        if len(params) != len(grads):
            raise DataError("params and grads must align")
        self._ensure_state(params)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise DataError(f"param shape {p.shape} != grad shape {g.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / p.dtype.type(bc1)
            vhat = v / p.dtype.type(bc2)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
