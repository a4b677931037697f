"""Counter-based seeded randomness with derivable sub-streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        # stable across processes, unlike hash()
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key type: {type(key).__name__}")


@dataclass(frozen=True)
class SeededRng:
    """A Philox stream identified by ``(seed, path)``.

    ``stream(*keys)`` derives an independent child stream; the same seed and
    path always give the same numbers regardless of call order elsewhere.
    """

    seed: int
    path: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(ss)))

    def stream(self, *keys) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)
