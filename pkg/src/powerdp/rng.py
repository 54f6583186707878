"""Counter-based per-node, per-epoch random streams.

Each node gets a Philox key derived from the master seed; the epoch index
sits in the high word of the counter, so the stream for (node, epoch) is
fixed no matter in which order, or on which worker, nodes are processed.
"""
from __future__ import annotations

import numpy as np


class StreamFactory:
    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._keys: dict[int, np.ndarray] = {}

    def _key(self, node: int) -> np.ndarray:
        key = self._keys.get(node)
        if key is None:
            seq = np.random.SeedSequence(self.master_seed, spawn_key=(int(node),))
            key = self._keys[node] = seq.generate_state(2, dtype=np.uint64)
        return key

    def generator(self, node: int, epoch: int) -> np.random.Generator:
        counter = np.array([0, 0, 0, int(epoch)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key(node), counter=counter))
