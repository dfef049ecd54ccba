"""Named, splittable random streams.

Every stochastic decision in a run draws from a stream addressed by
``(root seed, label path)``.  Children are derived by hashing labels into a
``SeedSequence`` so a sample's randomness never depends on how many draws
other samples made, which is what makes resume and batch reordering exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _label_words(label) -> list[int]:
    if isinstance(label, (int, np.integer)):
        v = int(label)
        if v < 0:
            raise ValueError("integer stream labels must be non-negative")
        return [v & 0xFFFFFFFF, (v >> 32) & 0xFFFFFFFF, 0x5EED]
    digest = hashlib.sha256(str(label).encode()).digest()[:8]
    return [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little"), 0x7A6]


@dataclass(frozen=True)
class Stream:
    seed: int
    path: tuple = ()

    def child(self, *labels) -> "Stream":
        return Stream(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        for label in self.path:
            words.extend(_label_words(label))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def state(self) -> dict:
        return {"seed": self.seed, "path": [str(p) if not isinstance(p, int) else p for p in self.path]}

    @classmethod
    def from_state(cls, state: dict) -> "Stream":
        return cls(int(state["seed"]), tuple(state["path"]))


def epoch_permutation(stream: Stream, n: int, epoch: int) -> np.ndarray:
    return stream.child("epoch", epoch).generator().permutation(n)


def batch_indices(stream: Stream, n: int, batch: int, step: int) -> np.ndarray:
    """Sample ids for ``step``; consecutive steps walk per-epoch permutations."""
    if n <= 0:
        raise ValueError("empty dataset")
    start = step * batch
    out = []
    pos = start
    while len(out) < batch:
        epoch, offset = divmod(pos, n)
        perm = epoch_permutation(stream, n, epoch)
        take = min(batch - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(out, dtype=np.int64)


def steps_for(epochs: float, dataset_size: int, batch: int) -> int:
    """Fractional epochs resolve to floor(epochs * n / batch) steps, at least 1."""
    if dataset_size <= 0:
        raise ValueError("empty dataset")
    return max(1, int(np.floor(epochs * dataset_size / batch + 1e-9)))
