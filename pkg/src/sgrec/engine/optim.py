from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import StateError
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers and step counter for :class:`Adam`."""

    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, then zero the gradients."""
    if len(state.m) != len(params):
        raise StateError(f"Adam state tracks {len(state.m)} tensors, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or '<unnamed>'} has no gradient")
    state.step += 1
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.data.dtype, copy=False)
        p.grad = np.zeros_like(p.data)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.005, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            self.params, learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps
        )

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)
