"""Deterministic random streams.

Every source of randomness in the package draws from a Philox counter-based
generator keyed by (seed, stream tags). Streams with different tags are
statistically independent and never share mutable state, so any component can
be re-run in isolation and reproduce its draws bit for bit.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a(tags) -> int:
    h = _FNV_OFFSET
    for tag in tags:
        for byte in str(tag).encode("utf-8") + b"\x1f":
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def stream(seed: int, *tags) -> np.random.Generator:
    """Generator keyed by (seed, tags); same key -> identical draw sequence."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    key = np.array([seed & _MASK64, _fnv1a(tags)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def subseed(seed: int, *tags) -> int:
    """Derived integer seed for handing to components that key their own stream."""
    return (seed ^ _fnv1a(tags)) & _MASK64
