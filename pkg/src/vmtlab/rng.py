"""Labeled random streams derived from one experiment seed.

Each consumer (batching, mixup, VAT, probes, ...) gets its own generator,
keyed by a stable hash of its label, so adding a consumer never shifts the
draws of another.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(label.encode()),))
    return np.random.Generator(np.random.PCG64(ss))


class Streams:
    """Lazily created named generators with serializable state."""

    def __init__(self, seed: int, prefix: str = ""):
        self.seed = int(seed)
        self.prefix = prefix
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, label: str) -> np.random.Generator:
        gen = self._gens.get(label)
        if gen is None:
            gen = self._gens[label] = stream(self.seed, self.prefix + label)
        return gen

    def state(self) -> dict:
        return {"seed": self.seed, "prefix": self.prefix,
                "streams": {k: g.bit_generator.state for k, g in self._gens.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "Streams":
        out = cls(state["seed"], state.get("prefix", ""))
        for label, st in state["streams"].items():
            gen = out[label]
            gen.bit_generator.state = st
        return out
