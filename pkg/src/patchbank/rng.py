"""Bit-stable pseudo-random primitives for reproducible sampling.

Training-image selection must give the same answer on every platform and in
every language that re-implements the protocol, so it is pinned to two small,
publicly specified generators (splitmix64 and xoshiro256**) rather than to any
library RNG whose stream could drift between versions.
"""

from __future__ import annotations

import hashlib

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def string_hash64(text: str) -> int:
    """Stable 64-bit hash of a string: first 8 bytes of SHA-256, little-endian.

    Python's builtin hash() is salted per process and must never leak into
    anything reproducible.
    """
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** 1.0 (Blackman & Vigna), seeded through splitmix64."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64_next(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) via unbiased bitmask rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        mask = (1 << (bound - 1).bit_length()) - 1 if bound > 1 else 0
        while True:
            v = self.next_u64() & mask
            if v < bound:
                return v

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle, descending index order."""
        for j in range(len(items) - 1, 0, -1):
            i = self.next_below(j + 1)
            items[i], items[j] = items[j], items[i]


def sampling_rng(seed: int, category: str) -> Xoshiro256StarStar:
    """The per-(seed, category) generator used for k-shot sampling."""
    _, mixed = splitmix64_next((seed & _MASK64) ^ string_hash64(category))
    return Xoshiro256StarStar(mixed)
