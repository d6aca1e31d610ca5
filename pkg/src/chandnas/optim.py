"""SGD and Adam over :class:`~chandnas.tensor.Tensor` parameters.

Both rules update ``param.data`` in place and zero the gradient afterwards.
A parameter without a gradient is an error rather than a silent no-op, so a
broken graph shows up immediately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


def _check_grads(params: Sequence[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            name = p.name or f"#{i}"
            raise MissingGradError(f"parameter {name} has no gradient; run backward first")


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    _check_grads(params)
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    state: AdamState | None = None,
) -> AdamState:
    """One bias-corrected Adam update; moments are keyed by position in ``params``."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    _check_grads(params)
    state = state if state is not None else AdamState()
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for i, p in enumerate(params):
        g = p.grad
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad = None
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas[0], self.betas[1], self.eps, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        sgd_step(self.params, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
