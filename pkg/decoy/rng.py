"""splitmix64: the only source of randomness in decoy.

Every seeded stage draws from a `SplitMix64` stream. Independent stages get their
own stream through `derive`, so adding draws to one stage never perturbs another.
"""

import math
from typing import List, MutableSequence, Sequence, TypeVar

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

T = TypeVar("T")


def mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def _tag_value(tag: str) -> int:
    # FNV-1a, so stream names map to stable integers across runs
    h = 0xCBF29CE484222325
    for byte in tag.encode():
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, *tags: object) -> int:
    """Derive a child seed from `seed` and a path of tags (strings or ints)."""
    value = seed & MASK64
    for tag in tags:
        part = _tag_value(tag) if isinstance(tag, str) else int(tag) & MASK64
        value = mix64((value ^ part) + GOLDEN & MASK64)
    return value


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self._state = self.seed

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN) & MASK64
        return mix64(self._state)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            value = self.next_u64()
            if value < limit:
                return lo + value % span

    def normal(self) -> float:
        """Standard normal draw (Box–Muller, one value per call)."""
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, count: int) -> List[float]:
        return [self.normal() for _ in range(count)]

    def choice(self, items: Sequence[T]) -> T:
        return items[self.randint(0, len(items) - 1)]

    def shuffle(self, items: MutableSequence[T]) -> None:
        """Fisher–Yates shuffle in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> List[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def derive(self, *tags: object) -> "SplitMix64":
        return SplitMix64(derive_seed(self.seed, *tags))
