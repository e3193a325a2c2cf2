"""Adam optimizer over a ParamStore"""

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from stoch_future.errors import NumericalError, ShapeError
from stoch_future.layers import ParamStore


@dataclass
class AdamState:
    """Per-parameter moments plus hyperparameters"""
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, learning_rate: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> 'AdamState':
        """Create a state with zero moments shaped like ``params``"""
        return cls(
            learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps, step=0,
            first_moment={name: np.zeros_like(t.data) for name, t in params.items()},
            second_moment={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(params: ParamStore, grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """
    Apply one bias-corrected Adam update in place

    Args:
        params: Parameters to update
        grads: Gradient per parameter name; missing names count as zero
        state: Optimizer state, advanced by one step

    Returns:
        The same ``state`` object
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {tensor.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(tensor.data))
        v = state.second_moment.setdefault(name, np.zeros_like(tensor.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data = (tensor.data - update).astype(tensor.data.dtype)
    state.step = step
    return state
