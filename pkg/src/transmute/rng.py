"""Per-trial counter-based random streams.

Every trial owns a Philox stream keyed by ``(root seed, stage, trial)``:

    SeedSequence(entropy=seed, spawn_key=(crc32(stage), trial))

so a trial's draws do not depend on which shard or worker runs it.
"""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

__all__ = ["stage_key", "trial_generator", "StreamBank"]


def stage_key(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


def trial_generator(seed: int, trial: int, stage: str = "simulate") -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stage_key(stage), int(trial)))
    return np.random.Generator(np.random.Philox(ss))


class StreamBank:
    """Buffered normal/uniform draws for a batch of independent streams.

    Each stream refills its own block when exhausted, so the sequence of
    values a given stream hands out is independent of the batch it sits in.
    """

    def __init__(self, generators: Sequence[np.random.Generator], dim: int, block: int = 64):
        self.gens = list(generators)
        self.dim = dim
        self.block = block
        n = len(self.gens)
        self._normals = np.empty((n, block, dim))
        self._uniforms = np.empty((n, block))
        self._np = np.full(n, block)
        self._up = np.full(n, block)

    @classmethod
    def for_trials(cls, seed: int, trials: Sequence[int], dim: int, stage: str = "simulate",
                   block: int = 64) -> "StreamBank":
        return cls([trial_generator(seed, t, stage) for t in trials], dim, block)

    def __len__(self):
        return len(self.gens)

    def normals(self, idx: np.ndarray) -> np.ndarray:
        stale = idx[self._np[idx] >= self.block]
        for i in stale:
            self._normals[i] = self.gens[i].standard_normal((self.block, self.dim))
            self._np[i] = 0
        out = self._normals[idx, self._np[idx]]
        self._np[idx] += 1
        return out

    def uniforms(self, idx: np.ndarray) -> np.ndarray:
        stale = idx[self._up[idx] >= self.block]
        for i in stale:
            self._uniforms[i] = self.gens[i].random(self.block)
            self._up[i] = 0
        out = self._uniforms[idx, self._up[idx]]
        self._up[idx] += 1
        # (0, 1] so that -log(u) is finite
        return 1.0 - out
