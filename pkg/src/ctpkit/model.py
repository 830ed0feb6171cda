"""A fixed-context MLP next-token model with hand-written backprop.

Concatenated context embeddings feed one GELU hidden layer and a softmax
output layer.  Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .rng import Xoshiro256

GELU_C = 0.7978845608
GELU_A = 0.044715

PARAM_NAMES = ("E", "W1", "b1", "W2", "b2")


class NumericalError(ArithmeticError):
    """Raised on non-finite losses or updates.  ``index`` names the offending example."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    context_length: int = 8
    embed_dim: int = 16
    hidden_dim: int = 64
    init_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "init_seed" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")

    @property
    def num_params(self) -> int:
        v, l, d, h = self.vocab_size, self.context_length, self.embed_dim, self.hidden_dim
        return v * d + (l * d * h + h) + (h * v + v)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, l, d, h = self.vocab_size, self.context_length, self.embed_dim, self.hidden_dim
        return {"E": (v, d), "W1": (h, l * d), "b1": (h,), "W2": (v, h), "b2": (v,)}


@dataclass
class ModelState:
    """Model parameters; also used as the container for gradients."""

    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelState":
        return ModelState(**{k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelState":
        return cls(**{k: np.zeros(s) for k, s in config.shapes().items()})

    def zeros_like(self) -> "ModelState":
        return ModelState(**{k: np.zeros_like(v) for k, v in self.tensors().items()})

    def bit_equal(self, other: "ModelState") -> bool:
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors().values(), other.tensors().values())
        )


def init_state(config: ModelConfig) -> ModelState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    An embedding lookup reads a single row, so its fan-in is 1.  Draws come
    from the portable PRNG in tensor order E, W1, W2.
    """
    rng = Xoshiro256(config.init_seed, 0)
    shapes = config.shapes()

    def uniform(shape, fan_in):
        n = int(np.prod(shape))
        bound = 1.0 / math.sqrt(fan_in)
        u = np.asarray(rng.randoms(n))
        return ((2.0 * u - 1.0) * bound).reshape(shape)

    return ModelState(
        E=uniform(shapes["E"], 1),
        W1=uniform(shapes["W1"], config.context_length * config.embed_dim),
        b1=np.zeros(shapes["b1"]),
        W2=uniform(shapes["W2"], config.hidden_dim),
        b2=np.zeros(shapes["b2"]),
    )


def gelu(x: np.ndarray) -> np.ndarray:
    # x * x * x, not x ** 3: numpy's generic power is an order of magnitude slower
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * (x * x * x))))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * (x2 * x)))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2)


def _check_tokens(state: ModelState, contexts: np.ndarray) -> None:
    v = state.E.shape[0]
    if contexts.size and (contexts.min() < 0 or contexts.max() >= v):
        raise ValueError(f"token out of range for vocabulary of size {v}")


def forward(state: ModelState, contexts) -> tuple[np.ndarray, dict]:
    """Logits for a batch of contexts (or a single context), plus cached activations."""
    ctx = np.asarray(contexts, dtype=np.int64)
    single = ctx.ndim == 1
    if single:
        ctx = ctx[None, :]
    _check_tokens(state, ctx)
    b = ctx.shape[0]
    z = state.E[ctx].reshape(b, -1)
    pre = z @ state.W1.T + state.b1
    a = gelu(pre)
    logits = a @ state.W2.T + state.b2
    cache = {"ctx": ctx, "z": z, "pre": pre, "a": a}
    return (logits[0] if single else logits), cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _nll(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(invalid="ignore", over="ignore"):
        logp = _log_softmax(logits)
    nll = -logp[np.arange(targets.size), targets]
    bad = np.flatnonzero(~np.isfinite(nll))
    if bad.size:
        raise NumericalError(f"non-finite loss at example {int(bad[0])}", int(bad[0]))
    return nll, logp


def loss_and_grad(state: ModelState, contexts, targets) -> tuple[float, ModelState]:
    """Mean cross-entropy over the batch and its gradient."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty batch")
    logits, cache = forward(state, contexts)
    ctx = cache["ctx"]
    b, L = ctx.shape
    v, d = state.E.shape
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError("target out of range for vocabulary")
    nll, logp = _nll(logits, targets)
    loss = float(nll.mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(b), targets] -= 1.0
    dlogits /= b
    dW2 = dlogits.T @ cache["a"]
    db2 = dlogits.sum(axis=0)
    dpre = (dlogits @ state.W2) * gelu_grad(cache["pre"])
    dW1 = dpre.T @ cache["z"]
    db1 = dpre.sum(axis=0)
    dz = (dpre @ state.W1).reshape(b * L, d)
    onehot = np.zeros((b * L, v))
    onehot[np.arange(b * L), ctx.reshape(-1)] = 1.0
    dE = onehot.T @ dz
    return loss, ModelState(E=dE, W1=dW1, b1=db1, W2=dW2, b2=db2)


def eval_loss(state: ModelState, contexts, targets, chunk: int = 8192) -> float:
    """Mean negative log-likelihood in nats over validation windows."""
    contexts = np.asarray(contexts, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty validation set")
    parts = []
    for lo in range(0, targets.size, chunk):
        logits, _ = forward(state, contexts[lo:lo + chunk])
        nll, _ = _nll(logits, targets[lo:lo + chunk])
        parts.append(nll)
    # fsum keeps the mean independent of window order
    return math.fsum(np.concatenate(parts)) / targets.size
