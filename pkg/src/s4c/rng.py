"""Counter-based uniform stream.

Every draw is a pure function of ``(key, round, purpose, index)``, so the
order in which the drafter and verifier ask for numbers never changes what
any individual draw returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class Rng:
    key: int

    @classmethod
    def from_seed(cls, seed: int) -> "Rng":
        return cls(_kernels.mix64(int(seed) & _kernels.MASK64))

    def split(self, stream: int) -> "Rng":
        """Independent child stream, e.g. one per generation session."""
        return Rng(_kernels.stream_key(self.key, int(stream)))

    def uniform(self, round_idx: int, purpose: int, index: int = 0) -> float:
        return _kernels.counter_uniform(self.key, round_idx, purpose, index)

    def uniforms(self, round_idx: int, purpose: int, indices) -> np.ndarray:
        return _kernels.counter_uniform_np(np.uint64(self.key), round_idx, purpose,
                                           np.asarray(indices))


def as_rng(seed_or_rng) -> Rng:
    if isinstance(seed_or_rng, Rng):
        return seed_or_rng
    return Rng.from_seed(int(seed_or_rng))
