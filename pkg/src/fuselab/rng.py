"""Deterministic counter-based random streams.

Every source of randomness in the project is a Philox4x64 bit stream keyed
by ``(seed, stream_id)``. Philox is counter-based, so streams are independent
by construction and reproducible from the key alone; golden fixtures pin the
bit stream. Gaussian draws use Box-Muller over the raw uniform doubles rather
than a library-specific ziggurat, so the mapping from bits to values is fully
specified here.
"""

from __future__ import annotations

import numpy as np

# Stream ids, one per consumer. Training derives one stream per step so that
# resuming from a checkpoint replays the exact tail of the run.
STREAM_TEXT_TABLE = 1
STREAM_LLM_TABLE = 2
STREAM_PARAMS = 3
STREAM_DATASET = 4
STREAM_EVAL_PROMPTS = 5
STREAM_SAMPLER = 6
STREAM_TRAIN_BASE = 1 << 32


def train_step_stream(step: int) -> int:
    """Stream id for the RNG owned by one training step."""
    return STREAM_TRAIN_BASE + step


class PhiloxStream:
    """One independent random stream identified by (seed, stream)."""

    def __init__(self, seed: int, stream: int):
        if seed < 0 or stream < 0:
            raise ValueError(f"seed and stream must be non-negative, got ({seed}, {stream})")
        self.seed = seed
        self.stream = stream
        key = np.array([seed, stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1), one per element: (raw64 >> 11) * 2**-53."""
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]; keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        if shape == ():
            return z[0]
        return z.reshape(shape)

    def integers(self, n: int, size=()) -> np.ndarray:
        """Uniform integers in [0, n)."""
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        draws = np.floor(self._gen.random(size) * n).astype(np.int64)
        return np.minimum(draws, n - 1)
