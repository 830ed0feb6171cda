"""Batch composition for compute-equivalent replay and discrete reservoir sampling.

A batch of ``s`` examples with replay fraction ``x`` holds
``floor(x*s*b) - floor(x*s*(b-1))`` replayed examples at batch ``b``, so the
cumulative replay count never drifts from ``x*s*n`` by a whole example.
Replay slots are split across buffers by largest remainder on each buffer's
running deficit against its target proportion.  Every source is read
sequentially, replay included, so old data comes back in the order it was
first seen.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import DomainMixture, TokenStream, sample_mixture
from .rng import Xoshiro256


class SourceExhaustedError(RuntimeError):
    def __init__(self, source: str, needed: int, available: int):
        super().__init__(f"source {source!r} exhausted: needed {needed} windows, {available} left")
        self.source = source


def exact_fraction(x: float) -> Fraction:
    # decimal literal the caller wrote (0.01 -> 1/100), not the binary float
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


# --------------------------------------------------------------------------- #
# Readers
# --------------------------------------------------------------------------- #

class SequentialReader:
    """Stride-1 windows from one stream, in order.

    With ``wrap`` the reader restarts at window 0 when it runs out and counts
    the restart; otherwise running out raises :class:`SourceExhaustedError`.
    """

    def __init__(self, stream: TokenStream, context_length: int, name: str | None = None,
                 pos: int = 0, wrap: bool = False, wraps: int = 0):
        self.stream = stream
        self.context_length = context_length
        self.name = name or stream.name
        self.pos = pos
        self.wrap = wrap
        self.wraps = wraps
        self._view = np.lib.stride_tricks.sliding_window_view(stream.tokens, context_length + 1)
        self.num_windows = stream.num_windows(context_length)

    def take(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        if n == 0:
            empty = np.zeros((0, self.context_length), dtype=np.int64)
            return empty, np.zeros(0, dtype=np.int64)
        left = self.num_windows - self.pos
        if n <= left:
            block = self._view[self.pos:self.pos + n]
            self.pos += n
        elif not self.wrap or self.num_windows == 0:
            raise SourceExhaustedError(self.name, n, left)
        else:
            parts = [self._view[self.pos:]]
            need = n - left
            while need > 0:
                self.wraps += 1
                k = min(need, self.num_windows)
                parts.append(self._view[:k])
                need -= k
            self.pos = k
            block = np.concatenate(parts)
        block = block.astype(np.int64)
        return block[:, :self.context_length], block[:, self.context_length]

    def cursor(self) -> tuple[int, int]:
        return self.pos, self.wraps


# --------------------------------------------------------------------------- #
# Plans
# --------------------------------------------------------------------------- #

@dataclass
class MixPlan:
    """Replay composition for one training phase.

    ``new_source`` and the replay sources are stream names; the streams
    themselves are bound when a :class:`MixReader` is built.
    """

    new_source: str
    replay_sources: list[tuple[str, float]] = field(default_factory=list)
    replay_fraction: float = 0.0
    batch_size: int = 32
    replay_order: str = "as_seen"

    def __post_init__(self):
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ValueError("replay_fraction must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.replay_order != "as_seen":
            raise ValueError("only in-order ('as_seen') replay is supported")
        if self.replay_fraction > 0:
            if not self.replay_sources:
                raise ValueError("replay needs at least one replay source")
            props = [p for _, p in self.replay_sources]
            if any(p < 0 for p in props) or abs(math.fsum(props) - 1.0) > 1e-9:
                raise ValueError("replay proportions must be non-negative and sum to 1")

    def to_json(self) -> dict:
        return {"new_source": self.new_source,
                "replay_sources": [[n, p] for n, p in self.replay_sources],
                "replay_fraction": self.replay_fraction,
                "batch_size": self.batch_size,
                "replay_order": self.replay_order}

    @classmethod
    def from_json(cls, d: dict) -> "MixPlan":
        d = dict(d)
        d["replay_sources"] = [(str(n), float(p)) for n, p in d.get("replay_sources", [])]
        return cls(**d)


def batch_composition(plan: MixPlan, b: int) -> tuple[int, int]:
    """``(replay_count, new_count)`` for 1-based batch index ``b``."""
    if b < 1:
        raise ValueError("batch index is 1-based")
    xs = exact_fraction(plan.replay_fraction) * plan.batch_size
    replay = math.floor(xs * b) - math.floor(xs * (b - 1))
    return replay, plan.batch_size - replay


def replay_counts(plan: MixPlan, n: int) -> np.ndarray:
    """Replay counts for batches ``1..n`` at once; same values as :func:`batch_composition`."""
    xs = exact_fraction(plan.replay_fraction) * plan.batch_size
    p, q = xs.numerator, xs.denominator
    if p * n >= 1 << 62 or q >= 1 << 62:
        return np.array([batch_composition(plan, b)[0] for b in range(1, n + 1)], dtype=np.int64)
    cum = (np.arange(n + 1, dtype=np.int64) * p) // q
    return np.diff(cum)


def token_budget(d0_tokens: float, d1_tokens: float, x: float) -> tuple[float, float, float]:
    """``(unique D1 tokens, replayed D0 tokens, total)`` under compute-equivalent replay."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("replay fraction must be in [0, 1]")
    fx = exact_fraction(x)
    d0, d1 = exact_fraction(d0_tokens), exact_fraction(d1_tokens)
    return float((1 - fx) * d1), float(fx * d1), float(d0 + d1)


def apportion(count: int, proportions: Sequence[float], drawn: Sequence[int]) -> list[int]:
    """Split ``count`` slots across buffers by largest remainder on the running deficit.

    ``drawn`` holds what each buffer has contributed so far.  On the first
    batch (nothing drawn) this is plain largest-remainder on ``proportions``.
    """
    if count == 0:
        return [0] * len(proportions)
    total = sum(drawn) + count
    deficits = [max(p * total - d, 0.0) for p, d in zip(proportions, drawn)]
    s = math.fsum(deficits)
    if s <= 0:
        deficits = list(proportions)
        s = math.fsum(deficits)
    quotas = [q * count / s for q in deficits]
    out = [math.floor(q) for q in quotas]
    rest = count - sum(out)
    order = sorted(range(len(quotas)), key=lambda j: (-(quotas[j] - out[j]), j))
    for j in order[:rest]:
        out[j] += 1
    return out


class MixReader:
    """Stateful iterator producing the batches of a :class:`MixPlan`."""

    def __init__(self, plan: MixPlan, new_reader: SequentialReader,
                 replay_readers: Sequence[SequentialReader] = (), batch_index: int = 0,
                 drawn: Sequence[int] | None = None):
        if len(replay_readers) != len(plan.replay_sources):
            raise ValueError("one reader per replay source")
        self.plan = plan
        self.new_reader = new_reader
        self.replay_readers = list(replay_readers)
        self.batch_index = batch_index
        self.drawn = list(drawn) if drawn is not None else [0] * len(replay_readers)
        self.props = [p for _, p in plan.replay_sources]

    def next_batch(self):
        """``(contexts, targets, counts)``; replayed windows come first."""
        self.batch_index += 1
        r, n = batch_composition(self.plan, self.batch_index)
        ctx_parts, tgt_parts = [], []
        per_source = apportion(r, self.props, self.drawn) if r else [0] * len(self.props)
        for j, (reader, k) in enumerate(zip(self.replay_readers, per_source)):
            if k:
                c, t = reader.take(k)
                ctx_parts.append(c)
                tgt_parts.append(t)
                self.drawn[j] += k
        c, t = self.new_reader.take(n)
        ctx_parts.append(c)
        tgt_parts.append(t)
        counts = {"replay": r, "new": n}
        for (name, _), k in zip(self.plan.replay_sources, per_source):
            counts[f"replay:{name}"] = k
        return np.concatenate(ctx_parts), np.concatenate(tgt_parts), counts

    def cursors(self) -> dict:
        out = {"new:" + self.new_reader.name: self.new_reader.cursor()}
        for reader in self.replay_readers:
            out["replay:" + reader.name] = reader.cursor()
        return out


class MixtureReader:
    """Batches whose examples pick a domain by categorical draw, then read it in order."""

    def __init__(self, mixture: DomainMixture, readers: Sequence[SequentialReader],
                 batch_size: int, rng: Xoshiro256):
        if len(readers) != len(mixture.weights):
            raise ValueError("one reader per domain")
        self.mixture = mixture
        self.readers = list(readers)
        self.batch_size = batch_size
        self.rng = rng
        self.batch_index = 0

    def next_batch(self):
        self.batch_index += 1
        picks = [sample_mixture(self.mixture, self.rng) for _ in range(self.batch_size)]
        picks_arr = np.asarray(picks)
        L = self.readers[0].context_length
        ctx = np.empty((self.batch_size, L), dtype=np.int64)
        tgt = np.empty(self.batch_size, dtype=np.int64)
        counts = {}
        for i, reader in enumerate(self.readers):
            where = np.flatnonzero(picks_arr == i)
            counts["domain:" + reader.name] = int(where.size)
            if where.size:
                c, t = reader.take(int(where.size))
                ctx[where] = c
                tgt[where] = t
        return ctx, tgt, counts

    def cursors(self) -> dict:
        return {"new:" + r.name: r.cursor() for r in self.readers}


# --------------------------------------------------------------------------- #
# Discrete reservoir sampling
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ReservoirState:
    """Replay-buffer composition at the start of dataset ``index``.

    ``history[i-1]`` holds the proportions ``p[i][j]`` for ``j < i``.
    """

    alpha: float
    sizes: tuple = ()
    history: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")

    @property
    def index(self) -> int:
        return len(self.sizes)

    @property
    def proportions(self) -> tuple:
        if not self.history:
            raise ValueError("replay buffer is empty before the first dataset")
        return self.history[-1]


def reservoir_update(state: ReservoirState, size: float) -> ReservoirState:
    """Fold dataset ``state.index`` (of ``size`` tokens) into the buffer."""
    if size <= 0:
        raise ValueError("dataset sizes must be positive")
    sizes = state.sizes + (size,)
    i = len(sizes)
    a = state.alpha
    total = math.fsum(sizes)
    row = []
    for j in range(i):
        own = sizes[j] * (1.0 - a) ** (0 if j == 0 else 1)
        replayed = [state.history[k - 1][j] * sizes[k] * a for k in range(j + 1, i)]
        row.append(math.fsum([own] + replayed) / total)
    return ReservoirState(a, sizes, state.history + (tuple(row),))


def reservoir_proportions(sizes: Sequence[float], alpha: float) -> list[tuple]:
    """``p[i]`` for ``i = 1..len(sizes)``: buffer composition before each later dataset."""
    if not sizes:
        raise ValueError("need at least one dataset size")
    state = ReservoirState(alpha)
    for s in sizes:
        state = reservoir_update(state, s)
    return list(state.history)


def audit_rows(plan: MixPlan, steps: int):
    """Per-batch composition rows for ``steps`` batches (no stream access)."""
    props = [p for _, p in plan.replay_sources]
    drawn = [0] * len(props)
    for b in range(1, steps + 1):
        r, n = batch_composition(plan, b)
        split = apportion(r, props, drawn) if r else [0] * len(props)
        drawn = [d + k for d, k in zip(drawn, split)]
        yield b, r, n, split


def audit_csv(plan: MixPlan, steps: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch", "replay", "new"] + [f"replay_{n}" for n, _ in plan.replay_sources])
    for b, r, n, split in audit_rows(plan, steps):
        w.writerow([b, r, n] + split)
    return buf.getvalue()
