"""Counter-based integer PRNG used wherever draws must be identical across platforms.

Every draw is a pure function of (key words, counter): there is no hidden state to
share between threads, and no float transcendentals on the sampling path.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix(*words: int) -> int:
    """Fold any number of integers into one 64-bit key."""
    h = 0
    for w in words:
        h = splitmix64(h ^ (w & _MASK64))
    return h


def hash_to_u64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    digest = hashlib.sha256(data).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def derive_seed(base_seed: int, label: str, index: int) -> int:
    """Stable child seed, e.g. one per ablation repetition."""
    if index < 0:
        raise ValueError("index must be non-negative")
    return hash_to_u64(f"{base_seed}:{label}:{index}")


class CounterStream:
    """Sequence of 64-bit draws keyed by a tuple of integers."""

    __slots__ = ("_key", "_counter")

    def __init__(self, *key: int) -> None:
        self._key = mix(*key)
        self._counter = 0

    def next_u64(self) -> int:
        value = mix(self._key, self._counter)
        self._counter += 1
        return value

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def chance(self, p: float) -> bool:
        """True with probability p, decided on 53-bit integers.

        p * 2**53 is exact for any double in [0, 1], so the comparison is too.
        """
        return (self.next_u64() >> 11) < int(p * (1 << 53))
