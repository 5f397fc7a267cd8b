"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ConfigError, RegistryError
from .tensor import Tensor


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class AdamWHyper:
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        b1, b2 = self.betas
        if not self.lr >= 0 or not (0 <= b1 < 1 and 0 <= b2 < 1) or self.weight_decay < 0:
            raise ConfigError(f"invalid AdamW hyperparameters {self}")


def adamw_step(params: Mapping[str, Tensor], state: AdamWState, hp: AdamWHyper) -> AdamWState:
    """One in-place update of every parameter from its ``grad`` buffer.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    for name, p in params.items():
        if p.grad is None:
            raise RegistryError(f"parameter '{name}' has no gradient")
    state.t += 1
    b1, b2 = hp.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + hp.eps)
        if hp.weight_decay:
            update = update + hp.weight_decay * p.data
        p.data -= (hp.lr * update).astype(p.data.dtype, copy=False)
    return state
