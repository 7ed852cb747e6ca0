"""Counter-based random streams.

A stream is identified by ``(seed, label)`` and a call counter. Every draw
builds a Philox generator keyed by a hash of the seed and label, positioned at
a counter block reserved for that call, so draws never depend on what other
streams did and a stream can be resumed from its counter alone.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, default_dtype

_MASK64 = (1 << 64) - 1


class RngStream:
    def __init__(self, seed, label="root", counter=0):
        self.seed = int(seed) & _MASK64
        self.label = str(label)
        self.counter = int(counter)
        digest = hashlib.blake2b(f"{self.seed}/{self.label}".encode(), digest_size=16).digest()
        self._key = int.from_bytes(digest, "little")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"

    def child(self, label):
        """Independent substream; does not advance this stream."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def _generator(self):
        counter = np.array([0, 0, self.counter & _MASK64, 0], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))

    def normal(self, shape, dtype=None):
        values = self._generator().standard_normal(size=tuple(shape))
        return values.astype(dtype or default_dtype())

    def uniform(self, shape, dtype=None):
        values = self._generator().random(size=tuple(shape))
        return values.astype(dtype or default_dtype())

    def permutation(self, n):
        return self._generator().permutation(n)

    def state(self):
        return {"seed": self.seed, "label": self.label, "counter": self.counter}

    @classmethod
    def from_state(cls, state):
        return cls(state["seed"], state["label"], state["counter"])


def rand_normal(stream, shape, dtype=None, requires_grad=False):
    """Tensor of i.i.d. standard normal draws from ``stream``."""
    return Tensor(stream.normal(shape, dtype), requires_grad=requires_grad)
