"""Seeded, label-splittable random streams.

Streams are PCG64 generators keyed by ``(seed, *labels)``.  Labels are
hashed with SHA-256 so the key is identical on every platform and Python
build (``hash()`` is salted per process and therefore unusable here).
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class Rng:
    """Deterministic random stream.

    >>> a = Rng(7).child("latent").normal((2,))
    >>> b = Rng(7).child("latent").normal((2,))
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = _path
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for label in _path:
            entropy.extend(_label_words(label))
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "Rng":
        """Independent substream; does not advance this stream."""
        return Rng(self.seed, self.path + (str(label),))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, shape=None):
        return self._gen.random(shape)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"
