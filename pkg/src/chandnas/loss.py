"""Training objective: task loss plus a size constraint and an OPs objective.

    total = task + lam * |S - s_star| + mu * O

``lam`` is fixed per search from the warmed-up seed (:func:`compute_lambda`);
``mu`` is the knob swept to trade accuracy for OPs.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

from .cost import cost_terms, ops_cost, size_cost
from .model import Model
from .tensor import Tensor


class TargetEqualsSeedError(ValueError):
    """The size target equals the seed size; the size penalty is moot."""


@dataclass
class LossBreakdown:
    task: float
    size_penalty: float
    ops_term: float
    lam: float
    mu: float
    total: float
    size: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def composite_loss(
    task: Tensor, model: Model, s_star: float, lam: float, mu: float
) -> tuple[Tensor, LossBreakdown]:
    if lam < 0 or mu < 0:
        raise ValueError(f"regularization strengths must be non-negative (lam={lam}, mu={mu})")
    if s_star <= 0:
        raise ValueError(f"target size must be positive, got {s_star}")
    size, ops = cost_terms(model)
    penalty = (size - s_star).abs()
    total = task + lam * penalty + mu * ops
    parts = LossBreakdown(
        task=task.item(),
        size_penalty=penalty.item(),
        ops_term=ops.item(),
        lam=lam,
        mu=mu,
        total=total.item(),
        size=size.item(),
    )
    return total, parts


def compute_lambda(seed_task_loss: float, seed_size: float, s_star: float) -> float:
    """Strength that makes the size penalty equal the task loss at search start."""
    gap = abs(seed_size - s_star)
    if gap == 0:
        raise TargetEqualsSeedError(
            f"target size {s_star} equals the seed size; skip the size penalty (use lam = 0)"
        )
    return seed_task_loss / gap


def check_strengths(lam: float, mu: float) -> None:
    """Warn when the OPs strength is not well below the size strength."""
    if mu > 0 and mu >= lam:
        warnings.warn(
            f"mu={mu:g} >= lam={lam:g}: the size constraint may no longer dominate", stacklevel=2
        )


def single_reg_loss(task: Tensor, model: Model, strength: float, metric: str = "size") -> Tensor:
    """Baseline objective ``task + strength * metric`` with one cost term."""
    if metric == "size":
        reg = size_cost(model)
    elif metric == "ops":
        reg = ops_cost(model)
    else:
        raise ValueError(f"unknown metric {metric!r}; expected 'size' or 'ops'")
    if strength < 0:
        raise ValueError(f"strength must be non-negative, got {strength}")
    return task + strength * reg
