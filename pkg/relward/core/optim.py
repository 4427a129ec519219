"""Adam with bias correction over the model's named parameter dictionary."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping

import numpy as np

from .errors import ArgumentError, ContractError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments per parameter name plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ArgumentError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ArgumentError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.step < 0:
            raise ArgumentError(f"step counter must be non-negative, got {self.step}")


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    frozen: Iterable[str] = (),
) -> AdamState:
    """Update ``params`` in place; names in ``frozen`` keep their values and moments."""
    frozen = set(frozen)
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None or np.shape(grad) != value.shape:
            raise ContractError(
                f"gradient for {name} has shape {None if grad is None else np.shape(grad)}, expected {value.shape}",
                stage="adam",
            )

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, value in params.items():
        if name in frozen:
            continue
        grad = np.asarray(grads[name], dtype=np.float64)
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        value -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    logger.debug("Adam step %d (lr=%g)", state.step, state.lr)
    return state
