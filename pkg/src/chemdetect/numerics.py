"""Seeded random streams and small numerical helpers.

Every stochastic step in the package draws from a :class:`PrngState`. The
generator is numpy's PCG64 seeded through ``SeedSequence(master_seed,
spawn_key=(stream_id, substream))``, so a ``(master_seed, stream_id)`` pair
always yields the same bit stream regardless of platform.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

ALGORITHM_ID = "PCG64"

# Stream namespaces, so that independent consumers never share a stream.
STREAM_DATA = 0
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_MISC = 4


class NonFiniteError(ArithmeticError):
    """Raised when a function evaluation returns NaN or Inf."""


class PrngState:
    """One independent random stream.

    Not safe to share between threads; create one stream per consumer.
    """

    algorithm_id = ALGORITHM_ID

    def __init__(self, master_seed: int, stream_id: int, substream: int = 0):
        if stream_id < 0 or substream < 0:
            raise ValueError("stream ids must be non-negative")
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        self.substream = int(substream)
        # SeedSequence wants non-negative entropy; fold signed 64-bit seeds.
        entropy = self.master_seed & 0xFFFF_FFFF_FFFF_FFFF
        seq = np.random.SeedSequence(entropy, spawn_key=(self.stream_id, self.substream))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def next_uniform(self) -> float:
        return float(self._gen.random())

    def next_gaussian(self, mean: float = 0.0, std: float = 1.0) -> float:
        if std < 0:
            raise ValueError(f"negative standard deviation: {std}")
        z = self._gen.standard_normal()
        if std == 0:
            return float(mean)
        return float(mean + std * z)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def gaussian(self, mean: float = 0.0, std: float = 1.0, size=None) -> np.ndarray:
        if std < 0:
            raise ValueError(f"negative standard deviation: {std}")
        z = self._gen.standard_normal(size)
        if std == 0:
            return np.full_like(z, mean, dtype=np.float64)
        return mean + std * z

    def bits(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=n, dtype=np.uint8)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def seed_stream(master_seed: int, stream_id: int, substream: int = 0) -> PrngState:
    """Return the stream identified by ``(master_seed, stream_id, substream)``."""
    return PrngState(master_seed, stream_id, substream)


def next_uniform(state: PrngState) -> float:
    return state.next_uniform()


def next_gaussian(state: PrngState, mean: float, std: float) -> float:
    return state.next_gaussian(mean, std)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is not modified. Raises :class:`NonFiniteError` if any evaluation
    is NaN or infinite.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
