"""Bias-corrected Adam that only touches trainable tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param, grad, state=None, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Update ``param`` in place and return the advanced state."""
    if state is None:
        state = AdamState(np.zeros_like(param), np.zeros_like(param))
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Per-tensor Adam state, keyed by parameter name.

    Frozen tensors (``requires_grad`` False) are skipped entirely, so their
    moments and step counts stay where they were until they train again.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, params):
        for name, t in params.items():
            if not t.requires_grad or t.grad is None:
                continue
            self.state[name] = adam_step(t.values, t.grad, self.state.get(name),
                                         self.lr, self.beta1, self.beta2, self.eps)
