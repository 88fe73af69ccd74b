"""Deterministic, splittable random streams backed by the Philox counter cipher.

Every stochastic component (each MC sample, each dropout site, each data
shuffle) draws from its own stream derived from (seed, purpose tag, index),
so results never depend on execution order or on how many draws some other
component made first.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode_part(part) -> bytes:
    if isinstance(part, (int, np.integer)):
        return b"i" + (int(part) & _MASK64).to_bytes(8, "little")
    if isinstance(part, str):
        raw = part.encode("utf-8")
        return b"s" + len(raw).to_bytes(4, "little") + raw
    raise TypeError(f"stream parts must be int or str, got {type(part).__name__}")


def derive_stream_id(base: int, *parts) -> int:
    """Hash a base stream id plus tag parts into a new 64-bit stream id."""
    h = hashlib.blake2b(digest_size=8)
    h.update((int(base) & _MASK64).to_bytes(8, "little"))
    for part in parts:
        h.update(_encode_part(part))
    return int.from_bytes(h.digest(), "little")


def derive_seed(seed: int, *parts) -> int:
    """Stable 64-bit sub-seed for components that take a bare integer seed."""
    return derive_stream_id(seed, "seed", *parts)


class RngStream:
    """Counter-based RNG stream: equal (seed, stream_id) means equal output.

    Distinct stream ids give independent, non-overlapping sequences (Philox
    keys select disjoint cipher streams), so a parent stream can hand out
    children via :meth:`derive` without any coordination. Derivation depends
    only on (seed, stream_id, parts), never on how much the parent has drawn.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def derive(self, *parts) -> "RngStream":
        """Child stream keyed by (this stream, parts); fresh counter state."""
        return RngStream(self.seed, derive_stream_id(self.stream_id, *parts))

    def uniform(self, size=None):
        """Float64 draws uniform on [0, 1)."""
        return self._gen.uniform(0.0, 1.0, size=size)

    def normal(self, size=None, std: float = 1.0, mean: float = 0.0):
        return self._gen.normal(mean, std, size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Uniform integers in [low, high); high=None means [0, low)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
