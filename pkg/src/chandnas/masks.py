"""Trainable per-output-channel gates.

Each searchable convolution owns (or shares, through a mask group) a vector
``theta`` with one entry per output channel.  The forward pass multiplies
every filter slice by the Heaviside step of its entry, so a channel with
``theta < 0`` is removed from the sampled architecture.  The backward pass
uses the BinaryConnect straight-through estimator, clipped to ``|theta| <= 1``,
and ``theta`` is clamped to ``[-1, 1]`` after every optimizer step.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, forward_op

THRESHOLD = 0.0
THETA_BOUND = 1.0


class ChannelMask:
    """Gate vector for one mask group; layers in the group share this object."""

    def __init__(self, size: int, group_id: str | None = None, init: float = 1.0,
                 threshold: float = THRESHOLD):
        self.theta = Tensor(np.full(int(size), init), name=f"theta[{group_id}]")
        self.group_id = group_id
        self.threshold = threshold
        self.frozen = True

    @property
    def frozen(self) -> bool:
        return not self.theta.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.theta.requires_grad = not value
        if value:
            self.theta.grad = None

    def __len__(self) -> int:
        return self.theta.size

    def binarized(self) -> np.ndarray:
        return (self.theta.data >= self.threshold).astype(np.int64)

    def alive_count(self) -> int:
        return int(self.binarized().sum())

    def gate(self, relaxed: bool = False) -> Tensor:
        return binarize(self.theta, self.threshold, relaxed=relaxed)

    def __repr__(self) -> str:
        return f"ChannelMask(group={self.group_id!r}, alive={self.alive_count()}/{len(self)}, frozen={self.frozen})"


def binarize(theta: Tensor, threshold: float = THRESHOLD, relaxed: bool = False) -> Tensor:
    """Heaviside step ``theta >= threshold`` with a straight-through backward."""
    return forward_op("heaviside_ste", [theta], {"threshold": threshold, "relaxed": relaxed})


def ste_backward(upstream_grad, theta) -> np.ndarray:
    """Gradient reaching ``theta`` through :func:`binarize` (clipped pass-through)."""
    g = np.asarray(upstream_grad, dtype=np.float64)
    th = theta.data if isinstance(theta, Tensor) else np.asarray(theta, dtype=np.float64)
    if g.shape != th.shape:
        raise ShapeError(f"ste_backward: grad shape {g.shape} != theta shape {th.shape}")
    return g * (np.abs(th) <= THETA_BOUND)


def apply_mask(w: Tensor, mask: "ChannelMask | Tensor", relaxed: bool = False) -> Tensor:
    """Multiply filter slice ``i`` of ``w`` (or entry ``i`` of a bias) by gate ``i``."""
    gate = mask.gate(relaxed) if isinstance(mask, ChannelMask) else mask
    if gate.ndim != 1 or gate.shape[0] != w.shape[0]:
        raise ShapeError(
            f"apply_mask: mask has {gate.shape[0] if gate.ndim else 0} entries "
            f"but the tensor has {w.shape[0]} output channels"
        )
    return w * gate.reshape((-1,) + (1,) * (w.ndim - 1))


def clamp_theta(mask: ChannelMask, bound: float = THETA_BOUND) -> None:
    np.clip(mask.theta.data, -bound, bound, out=mask.theta.data)


def enforce_min_alive(mask: ChannelMask) -> bool:
    """Revive the largest entry if every channel of the group died.

    Returns True when a reset happened.
    """
    th = mask.theta.data
    if (th >= mask.threshold).any():
        return False
    th[int(np.argmax(th))] = mask.threshold
    return True


def project(masks) -> int:
    """Clamp every mask and apply the min-alive floor; returns the number of revivals."""
    revived = 0
    for m in masks:
        clamp_theta(m)
        revived += enforce_min_alive(m)
    return revived
