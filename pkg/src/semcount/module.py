"""Parameter containers shared by the learned components."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Module:
    """Holds named parameters in insertion order."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Uniform samples in ``[-b, b]`` with ``b = gain * sqrt(3 / fan_in)`` (unit-variance scaling)."""
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
