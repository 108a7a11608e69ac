"""Named, counter-based random streams.

Every random draw in the lab comes from a stream keyed by
``(seed, name, index)``.  Streams are Philox generators, so the draws for a
given key do not depend on how many other streams were consumed before it,
and serial and parallel execution see identical numbers.
"""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, name, index)``."""
    if seed < 0 or seed > MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, _name_key(name), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, name: str, index: int = 0) -> int:
    """Derive a new 64-bit seed from a stream key (for nested components)."""
    return int(stream(seed, name, index).integers(0, MASK64, dtype=np.uint64, endpoint=True))


def categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Inverse-CDF draw of one index from ``probs``."""
    return inverse_cdf(probs, rng.random())


def inverse_cdf(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(k, len(probs) - 1)
