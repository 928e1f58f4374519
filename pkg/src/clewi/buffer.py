"""Reservoir-sampled rehearsal memory."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np


class EmptyBufferError(LookupError):
    """Raised when sampling from a buffer with no stored samples."""


class MemoryBuffer:
    """Fixed-capacity reservoir of ``(x, y[, logits])`` samples.

    Reservoir decisions and batch sampling draw from separate generators, so
    the stored contents depend only on the seed and the sequence of offers.
    """

    def __init__(self, capacity: int, seed: int = 0, store_logits: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.store_logits = store_logits
        self.seen_count = 0
        self._size = 0
        self._x: Optional[np.ndarray] = None
        self._y = np.zeros(capacity, dtype=np.int64)
        self._z: Optional[np.ndarray] = None
        self._reservoir_rng = np.random.default_rng([seed, 0])
        self._sample_rng = np.random.default_rng([seed, 1])

    def __len__(self) -> int:
        return self._size

    @property
    def x(self) -> np.ndarray:
        return self._x[:self._size] if self._x is not None else np.zeros((0,), np.float32)

    @property
    def y(self) -> np.ndarray:
        return self._y[:self._size]

    @property
    def logits(self) -> Optional[np.ndarray]:
        return None if self._z is None else self._z[:self._size]

    def _put(self, slot: int, x, y, z) -> None:
        if self._x is None:
            self._x = np.zeros((self.capacity, *np.shape(x)), dtype=np.float32)
        self._x[slot] = x
        self._y[slot] = y
        if self.store_logits:
            if z is None:
                raise ValueError("buffer stores logits but none were given")
            if self._z is None:
                self._z = np.zeros((self.capacity, len(z)), dtype=np.float32)
            self._z[slot] = z

    def add(self, x, y, logits=None) -> None:
        """Offer one sample (Algorithm R)."""
        if self._size < self.capacity:
            self._put(self._size, x, y, logits)
            self._size += 1
        else:
            j = int(self._reservoir_rng.integers(0, self.seen_count + 1))
            if j < self.capacity:
                self._put(j, x, y, logits)
        self.seen_count += 1

    def add_batch(self, xs, ys, logits=None) -> None:
        for i in range(len(ys)):
            self.add(xs[i], ys[i], None if logits is None else logits[i])

    def sample_batch(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        """Uniform draw with replacement: ``(x, y, logits or None)``."""
        if self._size == 0:
            raise EmptyBufferError("buffer is empty")
        rng = rng if rng is not None else self._sample_rng
        idx = rng.integers(0, self._size, size=batch_size)
        z = self._z[idx] if self._z is not None else None
        return self._x[idx], self._y[idx], z

    def iterate_all(self, batch_size: int = 32) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Every occupied slot exactly once, in slot order."""
        if self._size == 0:
            raise EmptyBufferError("buffer is empty")
        return self._iter_slots(batch_size)

    def _iter_slots(self, batch_size: int):
        for i in range(0, self._size, batch_size):
            j = min(i + batch_size, self._size)
            yield self._x[i:j], self._y[i:j]
