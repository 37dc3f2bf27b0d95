"""First-order optimizers operating on :class:`~snncvt.tensor.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class OptimizerState:
    """Hyperparameters plus per-parameter moment buffers."""

    kind: str = "sgd"  # "sgd" | "adam"
    learning_rate: float = 0.1
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, empty buffers."""
        return OptimizerState(self.kind, self.learning_rate, self.momentum, self.beta1,
                              self.beta2, self.eps, self.weight_decay)


def optimizer_step(state: OptimizerState, params: list) -> None:
    """Apply one update to ``params`` in place using their ``.grad``.

    Weight decay enters as an L2 term added to the gradient. Adam uses the
    usual bias-corrected moments.
    """
    for p in params:
        if p.grad is None:
            raise ValueError("optimizer_step: parameter has no gradient (call backward first)")
    state.step_count += 1
    lr = state.learning_rate
    for i, p in enumerate(params):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        key = (i, p.shape)
        if state.kind == "sgd":
            if state.momentum:
                buf = state.buffers.get(key)
                buf = g.copy() if buf is None else state.momentum * buf + g
                state.buffers[key] = buf
                g = buf
            p.data = (p.data - lr * g).astype(DTYPE)
        else:
            m, v = state.buffers.get(key, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.buffers[key] = (m, v)
            m_hat = m / (1 - state.beta1 ** state.step_count)
            v_hat = v / (1 - state.beta2 ** state.step_count)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


class Optimizer:
    """Binds an :class:`OptimizerState` to a fixed parameter list."""

    def __init__(self, params: list[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def step(self) -> None:
        optimizer_step(self.state, self.params)

    def zero_grad(self) -> None:
        zero_grad(self.params)
