"""Counter-keyed random streams.

Every random decision in a training run is drawn from a stream identified
by ``(master_seed, path)``, where ``path`` encodes tree index, cell index,
candidate index, and a purpose tag.  Streams are derived up front, before
any work is handed to a thread pool, so results never depend on worker
count or scheduling order.
"""

from __future__ import annotations

import numpy as np

# Purpose tags sit far above any realistic tree/cell/candidate index so a
# purpose-derived child path can never collide with an index-derived one.
_PURPOSE_BASE = 0x5EED0000

VOTES = _PURPOSE_BASE + 0
DIMS = _PURPOSE_BASE + 1
RATIOS = _PURPOSE_BASE + 2
NORMALS = _PURPOSE_BASE + 3
LEAF_CHOICE = _PURPOSE_BASE + 4
HOLDOUT = _PURPOSE_BASE + 5
LEAF_FIT = _PURPOSE_BASE + 6
SPLIT = _PURPOSE_BASE + 7
SYNTH = _PURPOSE_BASE + 8

_MAX_SEED = 2**64


class RandomStream:
    """Deterministic random stream keyed by (master_seed, path).

    Two streams with the same key produce bitwise-identical draw
    sequences; streams with different paths are independent.  Instances
    are cheap to derive and must not be shared between concurrent tasks
    (each task derives its own children instead).
    """

    __slots__ = ("master_seed", "path", "_gen")

    def __init__(self, master_seed: int, path: tuple[int, ...] = ()):
        master_seed = int(master_seed)
        if not 0 <= master_seed < _MAX_SEED:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        path = tuple(int(x) for x in path)
        if any(x < 0 for x in path):
            raise ValueError("path elements must be non-negative")
        self.master_seed = master_seed
        self.path = path
        self._gen = None

    def child(self, *elements: int) -> "RandomStream":
        """Derive an independent stream by extending the path."""
        return RandomStream(self.master_seed, self.path + elements)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(seq))
        return self._gen

    # Thin draw helpers.  Batched draws consume the underlying bit stream
    # exactly like repeated scalar draws, so pre-drawing buffers for a hot
    # loop yields the same values as drawing one decision at a time.

    def integers(self, high: int, size=None):
        return self.generator.integers(0, high, size=size)

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float, scale: float, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def uniform_open(self, size=None):
        """Uniform draws from the open interval (0, 1).

        Exact zeros (probability 2^-53 each) are rejected and redrawn in
        index order, keeping the consumption sequence deterministic.
        """
        scalar = size is None
        out = self.generator.random(1 if scalar else size)
        while True:
            mask = out == 0.0
            k = int(mask.sum())
            if k == 0:
                break
            out[mask] = self.generator.random(k)
        return float(out[0]) if scalar else out

    def __repr__(self) -> str:
        return f"RandomStream(master_seed={self.master_seed}, path={self.path})"
