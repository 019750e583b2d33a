"""Deterministic, platform-independent random streams.

Each (seed, label) pair names an independent stream. Element k of a stream
is produced by seeding a xoshiro256** state from a SplitMix64 chain and
taking one output word:

    base      = mix(mix(seed + GAMMA) ^ mix(label_hash))
    word_j(k) = mix(base + (4k + j + 1) * GAMMA)        j = 0..3
    out(k)    = rotl(word_1 * 5, 7) * 9                 (xoshiro256** scrambler)

where GAMMA = 0x9E3779B97F4A7C15 and mix is the SplitMix64 finalizer
(constants 0xBF58476D1CE4E5B9, 0x94D049BB133111EB, shifts 30/27/31).
Keying by element index instead of iterating the xoshiro state keeps the
generator vectorizable while staying fully specified; all arithmetic is
mod 2^64, so results are identical on any platform.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


def _label_hash(label: str) -> np.uint64:
    h = np.uint64(0)
    for ch in label.encode("utf-8"):
        h = _mix(h + np.uint64(ch) + _GAMMA)
    return h


class FieldRng:
    """One named random stream; draws are counted so calls never overlap."""

    def __init__(self, seed: int, label: str):
        with np.errstate(over="ignore"):
            self._base = _mix(_mix(np.uint64(seed % (1 << 64)) + _GAMMA) ^ _label_hash(label))
        self._offset = 0

    def u64(self, n: int) -> np.ndarray:
        k = np.arange(self._offset, self._offset + n, dtype=np.uint64)
        self._offset += n
        with np.errstate(over="ignore"):
            idx = np.uint64(4) * k
            w1 = _mix(self._base + (idx + np.uint64(2)) * _GAMMA)
            return _rotl(w1 * np.uint64(5), 7) * np.uint64(9)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """n ints uniform over [lo, hi) (by scaled uniforms; desk-scale bias is fine)."""
        return lo + np.floor(self.uniform(n) * (hi - lo)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic shuffle: argsort of fresh random keys."""
        return np.argsort(self.u64(n), kind="stable")
