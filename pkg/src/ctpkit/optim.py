"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelState, NumericalError

# tensors skipped when decay_all is False
NO_DECAY = frozenset({"b1", "b2", "E"})


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    eps: float = 1e-8
    # decay every tensor (default) or skip biases and embeddings
    decay_all: bool = True

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.eps < 0 or self.weight_decay < 0:
            raise ValueError("eps and weight_decay must be non-negative")


@dataclass
class OptimState:
    m: ModelState
    v: ModelState
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelState) -> "OptimState":
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self) -> "OptimState":
        return OptimState(self.m.copy(), self.v.copy(), self.t)


def reset_state(state: OptimState) -> OptimState:
    return OptimState(state.m.zeros_like(), state.v.zeros_like(), 0)


def global_norm(grad: ModelState) -> float:
    return math.sqrt(math.fsum(float(np.dot(g.ravel(), g.ravel())) for g in grad.tensors().values()))


def clip_gradient(grad: ModelState, clip_norm: float) -> ModelState:
    """Rescale ``grad`` to norm ``clip_norm`` if it is longer; otherwise return it as is."""
    norm = global_norm(grad)
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if norm <= clip_norm:
        return grad
    scale = clip_norm / norm
    return ModelState(**{k: g * scale for k, g in grad.tensors().items()})


def adamw_step(state: OptimState, params: ModelState, grad: ModelState, lr: float,
               config: OptimConfig) -> tuple[ModelState, OptimState]:
    """One AdamW update.  Returns new ``(params, state)``; inputs are not mutated."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.tensors().items():
        g = getattr(grad, name)
        m = b1 * getattr(state.m, name) + (1.0 - b1) * g
        v = b2 * getattr(state.v, name) + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        update = m_hat / (np.sqrt(v_hat) + config.eps)
        if config.weight_decay and (config.decay_all or name not in NO_DECAY):
            update = update + config.weight_decay * p
        out = p - lr * update
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite update in {name}")
        new_p[name], new_m[name], new_v[name] = out, m, v
    return ModelState(**new_p), OptimState(ModelState(**new_m), ModelState(**new_v), t)


def moment_contribution(beta: float, k: int) -> float:
    """Weight left on pre-transition moment estimates after ``k`` more steps."""
    if not 0.0 <= beta < 1.0 or k < 0:
        raise ValueError("need 0 <= beta < 1 and k >= 0")
    return beta ** k
