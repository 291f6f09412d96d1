"""Adam optimizer with bias correction over the tape engine's tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, TensorError

# t beyond this loses integer exactness in the bias-correction powers
_MAX_STEPS = 2 ** 53


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, params: list[Tensor], lr: float = 0.003,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise TensorError("adam betas must lie in [0, 1)")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise TensorError("adam_step: params/grads/state lengths differ")
    if state.t + 1 >= _MAX_STEPS:
        raise OverflowError("adam_step: step counter exhausted")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise TensorError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


class Adam:
    """Convenience wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 0.003,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(self.params, lr, beta1, beta2, epsilon)

    def step(self) -> None:
        grads = []
        for p in self.params:
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
