"""Synthetic first-order Markov corpora and the binary token-stream format.

Every corpus is a Markov chain over ``vocab_size`` tokens.  Chains carry most
of their transition mass on one half of the vocabulary; the base chain uses
the lower half, the strong-shift chain the upper half.  A weak shift mixes the
base chain with a fresh perturbation that shares the base's dominant half.

PRNG substreams (all keyed off ``transition_seed``):

* ``1``            base transition matrix
* ``2``            strong-shift transition matrix
* ``16 + v``       weak-shift perturbation matrix, variant ``v``
* ``TOKEN_STREAM | kind << 24 | split << 1 | is_val``  token sampling
"""

from __future__ import annotations

import bisect
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import MASK64, Xoshiro256

MAGIC = b"CTPTOKS1"
VERSION = 1
_HEADER = struct.Struct("<8sIIQ")

STREAM_BASE = 1
STREAM_STRONG = 2
STREAM_PERTURB = 16
TOKEN_STREAM = 1 << 32

KINDS = ("base", "weak", "strong", "iid")


class StreamRangeError(IndexError):
    pass


@dataclass(frozen=True)
class ShiftKind:
    """Which chain a corpus samples from.

    ``kind`` is one of ``base``, ``weak``, ``strong``, ``iid``.  ``lam`` is the
    weak-shift mix weight, ``index`` the IID split index or the weak-shift
    perturbation variant.
    """

    kind: str = "base"
    lam: float = 0.0
    index: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.kind == "weak" and not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"weak-shift lambda must be in [0, 1], got {self.lam}")
        if self.index < 0:
            raise ValueError("index must be non-negative")

    @classmethod
    def base(cls) -> "ShiftKind":
        return cls("base")

    @classmethod
    def weak(cls, lam: float, variant: int = 0) -> "ShiftKind":
        return cls("weak", lam, variant)

    @classmethod
    def strong(cls) -> "ShiftKind":
        return cls("strong")

    @classmethod
    def iid(cls, index: int) -> "ShiftKind":
        return cls("iid", 0.0, index)


@dataclass(frozen=True)
class CorpusSpec:
    name: str
    vocab_size: int = 64
    transition_seed: int = 0
    shift: ShiftKind = field(default_factory=ShiftKind)
    train_tokens: int = 2_000_000
    val_tokens: int = 20_008
    # chain shape: mass on the dominant half and peakiness of row weights
    dominant_mass: float = 0.95
    sharpness: float = 2.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.vocab_size > 1 << 16:
            raise ValueError("vocab_size must fit in u16 tokens")
        if self.shift.kind == "strong" and self.vocab_size < 4:
            raise ValueError("strong shift needs vocab_size >= 4 to halve the vocabulary")
        if self.train_tokens < 2 or self.val_tokens < 2:
            raise ValueError("train and validation streams need at least 2 tokens")
        if not 0.5 <= self.dominant_mass <= 1.0:
            raise ValueError("dominant_mass must be in [0.5, 1]")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "vocab_size": self.vocab_size,
            "transition_seed": self.transition_seed,
            "shift": {"kind": self.shift.kind, "lam": self.shift.lam, "index": self.shift.index},
            "train_tokens": self.train_tokens,
            "val_tokens": self.val_tokens,
            "dominant_mass": self.dominant_mass,
            "sharpness": self.sharpness,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        shift = d.pop("shift", {"kind": "base"})
        if isinstance(shift, str):
            shift = {"kind": shift}
        return cls(shift=ShiftKind(**shift), **d)

    def cache_key(self) -> str:
        blob = repr(sorted(self.to_json().items())).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class TokenStream:
    """An immutable, seekable token sequence over ``[0, vocab_size)``."""

    def __init__(self, tokens, vocab_size: int, name: str = ""):
        arr = np.asarray(tokens, dtype=np.uint16)
        if arr.ndim != 1:
            raise ValueError("tokens must be one-dimensional")
        if arr.size and int(arr.max()) >= vocab_size:
            raise ValueError("token id out of range for vocabulary")
        arr.setflags(write=False)
        self.tokens = arr
        self.vocab_size = int(vocab_size)
        self.name = name

    def __len__(self) -> int:
        return int(self.tokens.size)

    def __getitem__(self, idx):
        return self.tokens[idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenStream):
            return NotImplemented
        return self.vocab_size == other.vocab_size and np.array_equal(self.tokens, other.tokens)

    def num_windows(self, context_length: int) -> int:
        return max(0, len(self) - context_length)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, VERSION, self.vocab_size, len(self)))
        buf.write(self.tokens.astype("<u2").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, name: str = "") -> "TokenStream":
        if len(blob) < _HEADER.size:
            raise ValueError("truncated token-stream header")
        magic, version, vocab, count = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"unsupported token-stream version {version}")
        body = blob[_HEADER.size:]
        if len(body) != 2 * count:
            raise ValueError(f"expected {count} tokens, found {len(body) // 2}")
        return cls(np.frombuffer(body, dtype="<u2").astype(np.uint16), vocab, name)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, name: str = "") -> "TokenStream":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), name or path.stem)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def stream_window(s: TokenStream, pos: int, context_length: int) -> tuple[np.ndarray, int]:
    """Tokens ``[pos, pos+L)`` and the target at ``pos+L``."""
    if pos < 0 or context_length < 1 or pos + context_length >= len(s):
        raise StreamRangeError(
            f"window at {pos} with L={context_length} out of range for stream of {len(s)} tokens"
        )
    return s.tokens[pos:pos + context_length].copy(), int(s.tokens[pos + context_length])


def windows(s: TokenStream, context_length: int, start: int = 0, count: int | None = None):
    """``(contexts, targets)`` arrays for stride-1 windows starting at ``start``."""
    n = s.num_windows(context_length)
    if count is None:
        count = n - start
    if start < 0 or count < 0 or start + count > n:
        raise StreamRangeError(f"windows [{start}, {start + count}) out of range ({n} available)")
    view = np.lib.stride_tricks.sliding_window_view(s.tokens, context_length + 1)
    block = view[start:start + count].astype(np.int64)
    return block[:, :context_length], block[:, context_length]


# --------------------------------------------------------------------------- #
# Transition matrices
# --------------------------------------------------------------------------- #

def _halves(vocab_size: int) -> tuple[range, range]:
    mid = vocab_size // 2
    return range(0, mid), range(mid, vocab_size)


def _random_chain(rng: Xoshiro256, vocab_size: int, dominant_upper: bool,
                  dominant_mass: float, sharpness: float) -> np.ndarray:
    lower, upper = _halves(vocab_size)
    dom, rest = (upper, lower) if dominant_upper else (lower, upper)
    mat = np.zeros((vocab_size, vocab_size))
    for i in range(vocab_size):
        u = rng.randoms(vocab_size)
        w = np.array([(-math.log1p(-x)) ** sharpness for x in u]) + 1e-12
        row = np.zeros(vocab_size)
        idx_d = np.fromiter(dom, dtype=np.int64)
        idx_r = np.fromiter(rest, dtype=np.int64)
        row[idx_d] = dominant_mass * w[idx_d] / w[idx_d].sum()
        if idx_r.size:
            row[idx_r] = (1.0 - dominant_mass) * w[idx_r] / w[idx_r].sum()
        else:
            row[idx_d] = w[idx_d] / w[idx_d].sum()
        mat[i] = row / row.sum()
    return mat


def base_matrix(spec: CorpusSpec) -> np.ndarray:
    rng = Xoshiro256(spec.transition_seed, STREAM_BASE)
    return _random_chain(rng, spec.vocab_size, False, spec.dominant_mass, spec.sharpness)


def transition_matrix(spec: CorpusSpec) -> np.ndarray:
    """The row-stochastic matrix ``spec`` samples from."""
    kind = spec.shift.kind
    if kind in ("base", "iid"):
        return base_matrix(spec)
    if kind == "strong":
        rng = Xoshiro256(spec.transition_seed, STREAM_STRONG)
        return _random_chain(rng, spec.vocab_size, True, spec.dominant_mass, spec.sharpness)
    t0 = base_matrix(spec)
    lam = spec.shift.lam
    if lam == 0.0:
        return t0
    rng = Xoshiro256(spec.transition_seed, STREAM_PERTURB + spec.shift.index)
    p = _random_chain(rng, spec.vocab_size, False, spec.dominant_mass, spec.sharpness)
    mixed = (1.0 - lam) * t0 + lam * p
    return mixed / mixed.sum(axis=1, keepdims=True)


def token_stream_id(spec: CorpusSpec, validation: bool) -> int:
    code = KINDS.index(spec.shift.kind)
    split = spec.shift.index if spec.shift.kind in ("iid", "weak") else 0
    return (TOKEN_STREAM | (code << 24) | (split << 1) | int(validation)) & MASK64


def sample_chain(matrix: np.ndarray, rng: Xoshiro256, n: int) -> np.ndarray:
    """Sample ``n`` tokens; the first is uniform, the rest follow ``matrix``."""
    v = matrix.shape[0]
    cdf = np.cumsum(matrix, axis=1)
    cdf[:, -1] = 1.0
    rows = [row.tolist() for row in cdf]
    us = rng.randoms(n)
    out = [0] * n
    cur = min(int(us[0] * v), v - 1)
    out[0] = cur
    last = v - 1
    bis = bisect.bisect_right
    for i in range(1, n):
        nxt = bis(rows[cur], us[i])
        cur = nxt if nxt < last else last
        out[i] = cur
    return np.asarray(out, dtype=np.uint16)


def gen_corpus(spec: CorpusSpec) -> tuple[TokenStream, TokenStream]:
    """Generate the ``(train, val)`` streams for ``spec``."""
    mat = transition_matrix(spec)
    train = sample_chain(mat, Xoshiro256(spec.transition_seed, token_stream_id(spec, False)),
                         spec.train_tokens)
    val = sample_chain(mat, Xoshiro256(spec.transition_seed, token_stream_id(spec, True)),
                       spec.val_tokens)
    return (TokenStream(train, spec.vocab_size, spec.name),
            TokenStream(val, spec.vocab_size, spec.name + "_val"))


def entropy_rate(matrix: np.ndarray) -> float:
    """Entropy rate in nats of the chain at its stationary distribution."""
    vals, vecs = np.linalg.eig(matrix.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    pi = pi / pi.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(matrix > 0, np.log(matrix), 0.0)
    return float(-(pi[:, None] * matrix * logs).sum())


def load_or_generate(spec: CorpusSpec, cache_dir=None) -> tuple[TokenStream, TokenStream]:
    """``gen_corpus`` with an on-disk cache keyed by the spec contents."""
    if cache_dir is None:
        return gen_corpus(spec)
    cache_dir = Path(cache_dir)
    key = spec.cache_key()
    tp = cache_dir / f"{spec.name}-{key}.train.tok"
    vp = cache_dir / f"{spec.name}-{key}.val.tok"
    if tp.exists() and vp.exists():
        return TokenStream.load(tp, spec.name), TokenStream.load(vp, spec.name + "_val")
    train, val = gen_corpus(spec)
    cache_dir.mkdir(parents=True, exist_ok=True)
    train.save(tp)
    val.save(vp)
    return train, val


# --------------------------------------------------------------------------- #
# Domain mixtures
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class DomainMixture:
    """Sampling weights over several corpora; weights must sum to 1."""

    domains: tuple
    weights: tuple

    def __post_init__(self):
        if not self.domains or len(self.domains) != len(self.weights):
            raise ValueError("mixture needs one weight per domain")
        if any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ValueError("mixture weights must be finite and non-negative")
        if abs(math.fsum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {math.fsum(self.weights)}, not 1")

    @classmethod
    def proportional(cls, domains: Sequence, sizes: Sequence[float]) -> "DomainMixture":
        total = math.fsum(sizes)
        return cls(tuple(domains), tuple(s / total for s in sizes))


def sample_mixture(m: DomainMixture, rng: Xoshiro256) -> int:
    """Categorical draw of a domain index."""
    if len(m.weights) == 1:
        rng.next()
        return 0
    u = rng.random()
    acc = 0.0
    for i, w in enumerate(m.weights):
        acc += w
        if u < acc:
            return i
    # rounding slack at the top end
    return max(i for i, w in enumerate(m.weights) if w > 0)
