"""Canonical serialization, digests and the portable seeded PRNG."""

from __future__ import annotations

import hashlib
import json
from typing import Any, MutableSequence, Sequence, TypeVar

T = TypeVar("T")

_MASK64 = (1 << 64) - 1


def normalize_newlines(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def canonical_json(obj: Any) -> str:
    """Compact, key-sorted JSON used for every digest in the package."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    return sha256_hex(canonical_json(obj))


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014).

    Chosen over :mod:`random` because its output is fixed by its definition,
    not by the interpreter version, so seeded splits and minibatches replay
    identically anywhere.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randbelow(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: Sequence[T], k: int) -> list[T]:
        """``k`` distinct elements, in draw order."""
        if k > len(items):
            raise ValueError("sample larger than population")
        pool = list(items)
        out = []
        for _ in range(k):
            j = self.randbelow(len(pool))
            out.append(pool.pop(j))
        return out

    def choice(self, items: Sequence[T]) -> T:
        return items[self.randbelow(len(items))]


def derive_seed(seed: int, *salts: int) -> int:
    """Mix extra integers into a seed so sub-streams stay independent."""
    gen = SplitMix64(seed)
    value = gen.next_u64()
    for salt in salts:
        gen = SplitMix64(value ^ (salt & _MASK64))
        value = gen.next_u64()
    return value
