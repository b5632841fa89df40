from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from src.errors import ConfigError, ShapeError


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update over the keys present in grads.

    Parameters without a gradient are returned untouched. New arrays are
    returned; the inputs are not modified.
    """
    for key, g in grads.items():
        if key not in params:
            raise ConfigError(f"gradient for unknown parameter {key!r}")
        if np.shape(g) != params[key].shape:
            raise ShapeError(f"{key}: gradient shape {np.shape(g)} != parameter shape {params[key].shape}")
        if key in state.m and state.m[key].shape != params[key].shape:
            raise ShapeError(f"{key}: optimizer moments have shape {state.m[key].shape}")

    # 先整体校验再更新，出错时 state 不会被改一半
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    updated = dict(params)
    for key, g in grads.items():
        m = state.m.get(key, np.zeros_like(params[key]))
        v = state.v.get(key, np.zeros_like(params[key]))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        # 偏差修正
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        updated[key] = params[key] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, state
