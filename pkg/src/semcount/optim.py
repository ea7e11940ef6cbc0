"""Adam with bias correction, operating in place on :class:`Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        return cls(
            first_moment=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            second_moment=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError("adam_step: params, grads and moments differ in count")
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if not (p.shape == np.shape(g) == m.shape == v.shape):
            raise ShapeError(f"adam_step: shape mismatch for parameter {p.name or p.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


@dataclass
class Adam:
    """Convenience wrapper pairing a parameter list with its :class:`AdamState`."""

    params: list[Tensor]
    lr: float = 1e-3
    state: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)
