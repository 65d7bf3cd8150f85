"""Adam and the step learning-rate schedule."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update of the arrays in ``params`` (in place)."""
    if set(grads) - set(params):
        raise DimensionMismatch(f"gradients for unknown parameters: {set(grads) - set(params)}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        p = params[k]
        if np.shape(g) != np.shape(p):
            raise DimensionMismatch(f"{k}: grad {np.shape(g)} vs param {np.shape(p)}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def lr_at(iteration, lr0=1e-4, lr_decay=0.8, decay_every=5000):
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return lr0 * lr_decay ** (iteration // decay_every)
