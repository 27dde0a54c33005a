"""
Adam optimizer for the tensor engine.

``adam_step`` is the pure update rule over an explicit ``AdamState``; the
``Adam`` class binds a state to a model's named parameters for training
loops and checkpointing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from src.errors import ContractError
from src.tensor import Tensor

logger = logging.getLogger("mars.optim")


@dataclass
class AdamState:
    """Moments and hyperparameters of an Adam optimizer.

    Attributes:
        lr: Learning rate.
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator stabilizer.
        step: Number of updates applied so far.
        m: First moments keyed by parameter name.
        v: Second moments keyed by parameter name.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Apply one bias-corrected Adam update using each parameter's ``grad``.

    Args:
        state: Optimizer state, advanced in place.
        params: Named parameters with populated gradients.

    Returns:
        The same parameter mapping, with replaced ``data`` arrays.

    Raises:
        ContractError: If a parameter has no gradient.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: missing gradient for {missing[:5]}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = param.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != param.shape:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)
    return params


class Adam:
    """Adam bound to a fixed set of named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.state, self.params)

    def state_entries(self) -> dict[str, np.ndarray]:
        """Flatten moments and step counter for checkpoint storage."""
        entries: dict[str, np.ndarray] = {"optim.step": np.array([self.state.step], dtype=np.int64)}
        for name in self.state.m:
            entries[f"optim.m.{name}"] = self.state.m[name]
            entries[f"optim.v.{name}"] = self.state.v[name]
        return entries

    def load_state_entries(self, entries: dict[str, np.ndarray]) -> None:
        if "optim.step" not in entries:
            return
        self.state.step = int(entries["optim.step"][0])
        for name, param in self.params.items():
            if f"optim.m.{name}" in entries:
                self.state.m[name] = np.asarray(entries[f"optim.m.{name}"], dtype=param.dtype)
                self.state.v[name] = np.asarray(entries[f"optim.v.{name}"], dtype=param.dtype)
