"""Randomisation primitives: L2 clipping, Gaussian noise, Poisson subsampling.

All randomness goes through :class:`RngStream`. A stream is identified by a
run seed and a stream id; the underlying generator is numpy's PCG64 seeded
through ``SeedSequence([seed, stream_id])``, and normal variates come from
the Box-Muller transform of its doubles so the sequence can be replayed by
any implementation with the same uniform source.
"""

from __future__ import annotations

import math

import numpy as np

GENERATOR_FAMILY = "numpy-PCG64/SeedSequence([seed,stream_id])+Box-Muller"

_MASK64 = (1 << 64) - 1

# Stream roles; a stream id packs (round, role, client).
ROLE_PARTICIPATION = 1
ROLE_BATCH = 2
ROLE_CLIENT_NOISE = 3
ROLE_SERVER_NOISE = 4
ROLE_SENSITIVITY = 5
ROLE_DATA = 6
ROLE_PARTITION = 7
ROLE_INIT = 8


def stream_id(round_index: int, role: int, client: int = 0) -> int:
    """Pack ``(round, role, client)`` into a 64-bit stream id."""
    if not (0 <= round_index < 1 << 31 and 0 <= role < 1 << 8 and 0 <= client < 1 << 24):
        raise ValueError("stream id component out of range")
    return (round_index << 32) | (role << 24) | client


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, round_index: int, role: int, client: int = 0) -> "RngStream":
        return RngStream(self.seed, stream_id(round_index, role, client))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))  # 1 - u lies in (0, 1]
        angle = 2.0 * math.pi * u[pairs:]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        # Sort-by-uniform keeps the permutation defined by the uniform source.
        return np.argsort(self._gen.random(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, without replacement."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]


def clip(v: np.ndarray, c: float) -> np.ndarray:
    """Scale ``v`` down to L2 norm at most ``c``."""
    if not c > 0:
        raise ValueError("clipping norm must be positive")
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm <= c:
        return v.copy()
    return v * (c / norm)


def clip_rows(rows: np.ndarray, c: float) -> np.ndarray:
    """Row-wise :func:`clip` for a stack of vectors."""
    if not c > 0:
        raise ValueError("clipping norm must be positive")
    rows = np.asarray(rows, dtype=float)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    scale = np.minimum(1.0, c / np.where(norms > 0, norms, 1.0))
    return rows * scale


def gaussian_perturb(v: np.ndarray, std: float, rng: RngStream) -> np.ndarray:
    if std < 0:
        raise ValueError("noise std must be non-negative")
    v = np.asarray(v, dtype=float)
    if std == 0:
        return v.copy()
    return v + std * rng.normal(v.shape)


def sample_subset(n: int, prob: float, rng: RngStream) -> np.ndarray:
    """Poisson sampling: each index kept independently with probability ``prob``."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must lie in [0, 1], got {prob}")
    return np.flatnonzero(rng.uniform(n) < prob)
