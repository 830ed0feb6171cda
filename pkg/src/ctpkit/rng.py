"""Portable 64-bit PRNG: splitmix64 seeding a xoshiro256** generator.

Substreams are derived by keying: the 4 state words of substream ``k`` under
root seed ``s`` are the first four splitmix64 outputs starting from
``s ^ mix64(k + 1)``.  Any language with 64-bit unsigned arithmetic can
reproduce the same sequences.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """The splitmix64 output finalizer."""
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    return state, mix64(state)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** with a couple of convenience draws.

    ``random()`` returns ``(next() >> 11) * 2**-53``, the usual 53-bit double.
    """

    __slots__ = ("s",)

    def __init__(self, seed: int = 0, stream: int = 0):
        sm = (seed ^ mix64((stream + 1) & MASK64)) & MASK64
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        if not any(words):
            words[0] = 1
        self.s = words

    @classmethod
    def from_state(cls, words) -> "Xoshiro256":
        rng = cls.__new__(cls)
        rng.s = [int(w) & MASK64 for w in words]
        if len(rng.s) != 4 or not any(rng.s):
            raise ValueError("xoshiro256 state must be four words, not all zero")
        return rng

    def state(self) -> tuple[int, int, int, int]:
        return tuple(self.s)

    def next(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def randoms(self, n: int) -> list[float]:
        """``n`` successive ``random()`` draws, inlined for speed."""
        s0, s1, s2, s3 = self.s
        out = [0.0] * n
        scale = 1.0 / (1 << 53)
        m = MASK64
        for i in range(n):
            x = (s1 * 5) & m
            out[i] = ((((x << 7) | (x >> 57)) & m) * 9 & m) >> 11
            t = (s1 << 17) & m
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & m
            out[i] *= scale
        self.s = [s0, s1, s2, s3]
        return out

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by Lemire-free rejection on the top bits."""
        if n <= 0:
            raise ValueError("n must be positive")
        bits = max(1, (n - 1).bit_length())
        while True:
            r = self.next() >> (64 - bits)
            if r < n:
                return r
