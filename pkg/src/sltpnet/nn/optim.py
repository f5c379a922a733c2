from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .functional import ShapeError
from .tensor import Tensor


@dataclass
class OptimizerState:
    """SGD with Nesterov momentum and hyperbolic learning-rate decay."""

    lr0: float = 1e-4
    mu: float = 0.6
    decay: float = 1e-6
    t: int = 0
    velocity: list = field(default_factory=list)

    def lr(self) -> float:
        return self.lr0 / (1.0 + self.decay * self.t)


def sgd_nesterov_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """Update ``params`` in place from ``grads`` and advance ``state.t``.

    With ``lr_t = lr0 / (1 + decay * t)``::

        v <- mu * v - lr_t * g
        p <- p + mu * v - lr_t * g
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise ShapeError("optimizer velocity does not match the parameter list")
    lr = state.lr()
    mu = state.mu
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or v.shape != p.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape}, velocity {v.shape}")
        step = lr * g
        v *= mu
        v -= step
        p += mu * v
        p -= step
    state.t += 1


def step_tensors(tensors: Sequence[Tensor], state: OptimizerState) -> None:
    """Apply one optimizer update to trainable tensors carrying gradients."""
    params, grads = [], []
    for t in tensors:
        params.append(t.data)
        grads.append(t.grad if t.grad is not None else np.zeros_like(t.data))
    sgd_nesterov_step(params, grads, state)
