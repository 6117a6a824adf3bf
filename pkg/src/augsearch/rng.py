"""Counter-based deterministic random streams.

Every draw is a pure function of (seed, stream_id, counter), so any part of a
run can be replayed exactly: snapshot the counter, redo the draws, restore.
Streams derived with distinct ids are statistically independent for the same
seed (Philox keyed on the pair).
"""
from __future__ import annotations

import hashlib

import numpy as np

_U64 = np.uint64


def _label_to_id(label) -> int:
    """Map an arbitrary label (int or str) to a stable 64-bit id."""
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RandomStream:
    """Stateful facade over a counter-based (Philox) generator.

    The only mutable state is ``counter``; each sampling call consumes one
    counter slot, so draw k of stream (seed, stream_id) depends on nothing
    but (seed, stream_id, k).
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def __repr__(self):
        return (f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, "
                f"counter={self.counter})")

    # -- stream algebra ----------------------------------------------------

    def child(self, label) -> "RandomStream":
        """Independent stream derived from this one by a stable label."""
        mixed = _label_to_id((self.stream_id, _label_to_id(label)))
        return RandomStream(self.seed, mixed, 0)

    def clone(self) -> "RandomStream":
        """Copy at the current counter; replaying it repeats future draws."""
        return RandomStream(self.seed, self.stream_id, self.counter)

    # -- drawing -----------------------------------------------------------

    def _next_gen(self) -> np.random.Generator:
        # One Philox block per call, keyed on (seed, stream_id); the call
        # index sits in the high counter word so draws never overlap.
        bg = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=_U64),
            counter=np.array([0, 0, 0, self.counter], dtype=_U64),
        )
        self.counter += 1
        return np.random.Generator(bg)

    def uniform(self, size=None, low=0.0, high=1.0) -> np.ndarray:
        return self._next_gen().uniform(low, high, size=size)

    def normal(self, size=None) -> np.ndarray:
        return self._next_gen().standard_normal(size=size)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self._next_gen().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_gen().permutation(n)

    def shuffle_indices(self, n: int) -> np.ndarray:
        return self.permutation(n)

    def gumbel(self, size=None) -> np.ndarray:
        """Standard Gumbel noise as -log(-log(u)), u clamped away from {0,1}."""
        u = np.clip(self.uniform(size=size), 1e-10, 1.0 - 1e-10)
        return -np.log(-np.log(u))

    def logistic(self, size=None) -> np.ndarray:
        """Standard logistic noise log(u) - log(1-u), clamped like gumbel()."""
        u = np.clip(self.uniform(size=size), 1e-10, 1.0 - 1e-10)
        return np.log(u) - np.log1p(-u)
