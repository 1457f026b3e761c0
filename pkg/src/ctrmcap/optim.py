import math
from typing import Mapping

import numpy as np


class Adam:
    """Adam with bias-corrected moments; state is plain dicts so it checkpoints exactly."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; the inputs are not modified."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            if self.lr == 0.0:
                updated[name] = p
                continue
            m_hat = m / bc1
            v_hat = v / bc2
            updated[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    # summed in name order so the result does not depend on dict insertion order
    norm = math.sqrt(sum(float((grads[k] * grads[k]).sum()) for k in sorted(grads)))
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm
