"""Adam with bias correction, updating parameter arrays in place."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..errors import ContractError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """One update. Parameter arrays keep their identity and dtype."""
    if set(grads) - set(params):
        raise ContractError(
            f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
